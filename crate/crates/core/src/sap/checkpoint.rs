use std::fs;
use std::path::Path;

use super::{PredictorParams, Regressor};
use crate::{Error, Result};

pub const HALP_MAGIC: [u8; 4] = *b"HALP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

impl PredictorParams {
    /// Header `{magic, version, L, D, hidden_p, mha_groups, mlp_groups}`
    /// followed by W1, b1, W2, b2 of every (layer, kind) as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&HALP_MAGIC);
        for v in [
            VERSION as usize,
            self.num_layers,
            self.hidden_dim,
            self.hidden_p,
            self.mha_groups,
            self.mlp_groups,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for r in self.layers.iter().flatten() {
            for w in r.params() {
                out.extend_from_slice(&(*w as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN || buf[..4] != HALP_MAGIC {
            return Err(Error::Format("not a predictor checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(Error::Format(format!("predictor version {}", word(0))));
        }
        let (num_layers, hidden_dim, hidden_p, mha_groups, mlp_groups) =
            (word(1), word(2), word(3), word(4), word(5));
        let shapes = [mha_groups, mlp_groups];
        let per_layer: usize = shapes
            .iter()
            .map(|&g| Regressor::zeros(hidden_dim, hidden_p, g).num_params())
            .sum();
        let count = num_layers.saturating_sub(1);
        let expected = HEADER_LEN + 4 * per_layer * count;
        if buf.len() != expected {
            return Err(Error::Format(format!(
                "predictor checkpoint is {} bytes, expected {expected}",
                buf.len()
            )));
        }
        let mut floats = buf[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
        let layers = (0..count)
            .map(|_| {
                shapes.map(|g| {
                    let mut r = Regressor::zeros(hidden_dim, hidden_p, g);
                    r.params_mut().for_each(|w| *w = floats.next().unwrap());
                    r
                })
            })
            .collect();
        let params = Self {
            num_layers,
            hidden_dim,
            hidden_p,
            mha_groups,
            mlp_groups,
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
