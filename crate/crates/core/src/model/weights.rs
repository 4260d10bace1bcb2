use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numkernel::{Matrix, SeededRng};

const MAGIC: &[u8; 8] = b"FICLWTS\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 5 * 8 + 8 + 8;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_q: Matrix<f64>,
    pub w_k: Matrix<f64>,
    pub w_v: Matrix<f64>,
    pub w_o: Matrix<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub ff_in: Matrix<f64>,
    pub ff_in_bias: Vec<f64>,
    pub ff_out: Matrix<f64>,
    pub ff_out_bias: Vec<f64>,
}

/// All parameters of the toy decoder.
///
/// Serialization order (every tensor row-major, every value a little-endian `f64`):
/// token embedding, position embedding, then per layer `ln1_gain, ln1_bias, w_q, w_k,
/// w_v, w_o, ln2_gain, ln2_bias, ff_in, ff_in_bias, ff_out, ff_out_bias`, then
/// `final_gain, final_bias, unembed`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embed: Matrix<f64>,
    pub pos_embed: Matrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub final_bias: Vec<f64>,
    pub unembed: Matrix<f64>,
}

impl ModelWeights {
    /// Gaussian initialization from `config.seed`; normalization gains start at one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, "model-init");
        let mut w = Self::zeros(config);
        w.visit_mut(|name, values| {
            let fill = if name.ends_with("gain") {
                Some(1.0)
            } else if name.ends_with("bias") {
                Some(0.0)
            } else {
                None
            };
            for v in values.iter_mut() {
                *v = fill.unwrap_or_else(|| rng.normal(INIT_STD));
            }
        });
        Ok(w)
    }

    /// Same shapes as `config`, every value zero. Also used as a gradient buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff();
        let layer = LayerWeights {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            ff_in: Matrix::zeros(d, f),
            ff_in_bias: vec![0.0; f],
            ff_out: Matrix::zeros(f, d),
            ff_out_bias: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            token_embed: Matrix::zeros(config.vocab_size, d),
            pos_embed: Matrix::zeros(config.max_positions, d),
            layers: vec![layer; config.n_layers],
            final_gain: vec![0.0; d],
            final_bias: vec![0.0; d],
            unembed: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Visits every tensor in serialization order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        f("token_embed", self.token_embed.data());
        f("pos_embed", self.pos_embed.data());
        for l in &self.layers {
            f("ln1_gain", &l.ln1_gain);
            f("ln1_bias", &l.ln1_bias);
            f("w_q", l.w_q.data());
            f("w_k", l.w_k.data());
            f("w_v", l.w_v.data());
            f("w_o", l.w_o.data());
            f("ln2_gain", &l.ln2_gain);
            f("ln2_bias", &l.ln2_bias);
            f("ff_in", l.ff_in.data());
            f("ff_in_bias", &l.ff_in_bias);
            f("ff_out", l.ff_out.data());
            f("ff_out_bias", &l.ff_out_bias);
        }
        f("final_gain", &self.final_gain);
        f("final_bias", &self.final_bias);
        f("unembed", self.unembed.data());
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("token_embed", self.token_embed.data_mut());
        f("pos_embed", self.pos_embed.data_mut());
        for l in &mut self.layers {
            f("ln1_gain", &mut l.ln1_gain);
            f("ln1_bias", &mut l.ln1_bias);
            f("w_q", l.w_q.data_mut());
            f("w_k", l.w_k.data_mut());
            f("w_v", l.w_v.data_mut());
            f("w_o", l.w_o.data_mut());
            f("ln2_gain", &mut l.ln2_gain);
            f("ln2_bias", &mut l.ln2_bias);
            f("ff_in", l.ff_in.data_mut());
            f("ff_in_bias", &mut l.ff_in_bias);
            f("ff_out", l.ff_out.data_mut());
            f("ff_out_bias", &mut l.ff_out_bias);
        }
        f("final_gain", &mut self.final_gain);
        f("final_bias", &mut self.final_bias);
        f("unembed", self.unembed.data_mut());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v| n += v.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(|_, v| out.extend_from_slice(v));
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.visit_mut(|_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.max_positions] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        self.visit(|_, v| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        });
        out
    }

    /// Parses a weight file. With `expected`, every config field must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::WeightFormat("truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let field = |i: usize| u64_at(12 + 8 * i) as usize;
        let config = ModelConfig {
            vocab_size: field(0),
            d_model: field(1),
            n_heads: field(2),
            n_layers: field(3),
            max_positions: field(4),
            seed: u64_at(52),
        };
        if let Some(want) = expected {
            let pairs: [(&'static str, u64, u64); 6] = [
                ("vocab_size", config.vocab_size as u64, want.vocab_size as u64),
                ("d_model", config.d_model as u64, want.d_model as u64),
                ("n_heads", config.n_heads as u64, want.n_heads as u64),
                ("n_layers", config.n_layers as u64, want.n_layers as u64),
                ("max_positions", config.max_positions as u64, want.max_positions as u64),
                ("seed", config.seed, want.seed),
            ];
            for (name, found, wanted) in pairs {
                if found != wanted {
                    return Err(Error::ConfigMismatch {
                        field: name,
                        found: found.to_string(),
                        expected: wanted.to_string(),
                    });
                }
            }
        }
        config
            .validate()
            .map_err(|e| Error::WeightFormat(format!("header config: {e}")))?;
        let mut weights = Self::zeros(&config);
        let count = u64_at(60) as usize;
        if count != weights.param_count() {
            return Err(Error::WeightFormat(format!(
                "parameter count {count} does not match header shapes ({})",
                weights.param_count()
            )));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(Error::WeightFormat(format!(
                "body holds {} bytes, expected {}",
                body.len(),
                8 * count
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight file"));
        }
        weights.unflatten(&flat)?;
        Ok(weights)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir
        .map(|d| d.join(format!(".{}.tmp", file_name.to_string_lossy())))
        .unwrap_or_else(|| format!(".{}.tmp", file_name.to_string_lossy()).into());
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_positions: 16,
            seed: 3,
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = ModelWeights::init(&small()).unwrap();
        w.save(&path).unwrap();
        let back = ModelWeights::load(&path, Some(&small())).unwrap();
        assert_eq!(back.to_bytes(), w.to_bytes());
        assert_eq!(back, w);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = ModelWeights::init(&small()).unwrap().to_bytes();
        for cut in [4, HEADER_LEN - 1, bytes.len() - 1] {
            assert!(matches!(
                ModelWeights::from_bytes(&bytes[..cut], None),
                Err(Error::WeightFormat(_))
            ));
        }
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let bytes = ModelWeights::init(&small()).unwrap().to_bytes();
        let other = ModelConfig {
            n_layers: 3,
            ..small()
        };
        let err = ModelWeights::from_bytes(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { field: "n_layers", .. }));
        assert!(err.to_string().contains("n_layers"));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = ModelWeights::init(&small()).unwrap().to_bytes();
        bytes[8] = 9;
        assert!(ModelWeights::from_bytes(&bytes, None).is_err());
        bytes[0] = b'X';
        assert!(ModelWeights::from_bytes(&bytes, None).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelWeights::init(&small()).unwrap();
        let b = ModelWeights::init(&small()).unwrap();
        assert_eq!(a, b);
        let c = ModelWeights::init(&ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.layers[0].ln1_gain, vec![1.0; 8]);
        assert_eq!(a.layers[1].ff_in_bias, vec![0.0; 32]);
    }
}
