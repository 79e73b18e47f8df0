//! JSON weight bundles.
//!
//! ```json
//! {"format": "gqa", "version": 1, "wq": [...], "wk": [...], "wv": [...], "wo": {...}}
//! ```
//!
//! Every matrix is `{"shape": [rows, cols], "data": [row-major values]}`.
//! Formats: `mha`, `gqa` (fewer KV heads than query heads), `mla` (unmerged
//! latent weights) and `mla-merged` (merged weights plus `d_head`, which the
//! score scaling needs and the merged shapes no longer carry).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{MergedMlaWeights, MlaSpec, MlaWeights};
use crate::linalg::Matrix;
use crate::multihead::{MhaSpec, MhaWeights};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightBundle {
    Mha(MhaWeights),
    Gqa(MhaWeights),
    Mla(MlaWeights),
    MlaMerged {
        weights: MergedMlaWeights,
        d_head: usize,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
enum Repr {
    Mha {
        version: u32,
        wq: Vec<Matrix>,
        wk: Vec<Matrix>,
        wv: Vec<Matrix>,
        wo: Matrix,
    },
    Gqa {
        version: u32,
        wq: Vec<Matrix>,
        wk: Vec<Matrix>,
        wv: Vec<Matrix>,
        wo: Matrix,
    },
    Mla {
        version: u32,
        w_l: Matrix,
        w_lq: Matrix,
        w_lqq: Vec<Matrix>,
        w_lk: Vec<Matrix>,
        w_lv: Vec<Matrix>,
        wo: Matrix,
    },
    MlaMerged {
        version: u32,
        d_head: usize,
        w_l: Matrix,
        w_lq: Matrix,
        w_lqk: Vec<Matrix>,
        w_lo: Matrix,
    },
}

impl WeightBundle {
    /// Tags per-head weights `mha` or `gqa` by their KV head count.
    pub fn from_mha(w: MhaWeights) -> Self {
        if w.n_kv_heads() == w.n_heads() {
            WeightBundle::Mha(w)
        } else {
            WeightBundle::Gqa(w)
        }
    }

    pub fn format(&self) -> &'static str {
        match self {
            WeightBundle::Mha(_) => "mha",
            WeightBundle::Gqa(_) => "gqa",
            WeightBundle::Mla(_) => "mla",
            WeightBundle::MlaMerged { .. } => "mla-merged",
        }
    }

    /// Checks shapes and the tag against the head counts.
    pub fn validate(&self) -> Result<()> {
        match self {
            WeightBundle::Mha(w) | WeightBundle::Gqa(w) => {
                let spec = w.infer_spec()?;
                w.validate(&spec)?;
                let is_mha = matches!(self, WeightBundle::Mha(_));
                if is_mha != (spec.n_kv_heads == spec.n_heads) {
                    return Err(Error::Format(format!(
                        "format {} does not fit {} query heads and {} KV heads",
                        self.format(),
                        spec.n_heads,
                        spec.n_kv_heads
                    )));
                }
                Ok(())
            }
            WeightBundle::Mla(w) => w.infer_spec().map(|_| ()),
            WeightBundle::MlaMerged { .. } => self.mla_spec().map(|_| ()),
        }
    }

    pub fn mha_spec(&self) -> Result<MhaSpec> {
        match self {
            WeightBundle::Mha(w) | WeightBundle::Gqa(w) => w.infer_spec(),
            _ => Err(Error::Format(format!(
                "{} bundle has no per-head spec",
                self.format()
            ))),
        }
    }

    pub fn mla_spec(&self) -> Result<MlaSpec> {
        match self {
            WeightBundle::Mla(w) => w.infer_spec(),
            WeightBundle::MlaMerged { weights, d_head } => {
                let n_heads = weights.w_lqk.len();
                if n_heads == 0 || weights.w_lo.rows() % n_heads != 0 {
                    return Err(Error::Format(
                        "merged bundle head count does not divide W^{LO}".into(),
                    ));
                }
                let spec = MlaSpec::new(
                    n_heads,
                    weights.w_l.rows(),
                    *d_head,
                    weights.w_l.cols(),
                    weights.w_lq.cols(),
                    weights.w_lo.cols(),
                )?;
                weights.validate(&spec)?;
                Ok(spec)
            }
            _ => Err(Error::Format(format!(
                "{} bundle has no latent spec",
                self.format()
            ))),
        }
    }

    pub fn to_json(&self) -> String {
        let version = FORMAT_VERSION;
        let repr = match self.clone() {
            WeightBundle::Mha(w) => Repr::Mha {
                version,
                wq: w.wq,
                wk: w.wk,
                wv: w.wv,
                wo: w.wo,
            },
            WeightBundle::Gqa(w) => Repr::Gqa {
                version,
                wq: w.wq,
                wk: w.wk,
                wv: w.wv,
                wo: w.wo,
            },
            WeightBundle::Mla(w) => Repr::Mla {
                version,
                w_l: w.w_l,
                w_lq: w.w_lq,
                w_lqq: w.w_lqq,
                w_lk: w.w_lk,
                w_lv: w.w_lv,
                wo: w.wo,
            },
            WeightBundle::MlaMerged { weights, d_head } => Repr::MlaMerged {
                version,
                d_head,
                w_l: weights.w_l,
                w_lq: weights.w_lq,
                w_lqk: weights.w_lqk,
                w_lo: weights.w_lo,
            },
        };
        serde_json::to_string(&repr).expect("weight bundles serialize")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let repr: Repr = serde_json::from_str(json).map_err(|e| Error::Format(e.to_string()))?;
        let (version, bundle) = match repr {
            Repr::Mha {
                version,
                wq,
                wk,
                wv,
                wo,
            } => (version, WeightBundle::Mha(MhaWeights { wq, wk, wv, wo })),
            Repr::Gqa {
                version,
                wq,
                wk,
                wv,
                wo,
            } => (version, WeightBundle::Gqa(MhaWeights { wq, wk, wv, wo })),
            Repr::Mla {
                version,
                w_l,
                w_lq,
                w_lqq,
                w_lk,
                w_lv,
                wo,
            } => (
                version,
                WeightBundle::Mla(MlaWeights {
                    w_l,
                    w_lq,
                    w_lqq,
                    w_lk,
                    w_lv,
                    wo,
                }),
            ),
            Repr::MlaMerged {
                version,
                d_head,
                w_l,
                w_lq,
                w_lqk,
                w_lo,
            } => (
                version,
                WeightBundle::MlaMerged {
                    weights: MergedMlaWeights {
                        w_l,
                        w_lq,
                        w_lqk,
                        w_lo,
                    },
                    d_head,
                },
            ),
        };
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
