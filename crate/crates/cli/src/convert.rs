use serde::{Deserialize, Serialize};

use attnlab_core::attention::MaskPolicy;
use attnlab_core::io::WeightBundle;
use attnlab_core::latent::{factorize_mha_to_mla, merge_weights, mla_forward};
use attnlab_core::multihead::self_attention;
use attnlab_core::rng::SeededRng;

use crate::format::{sci, to_json};
use crate::{ConvertArgs, Failure, Outcome};

const PROBE_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertReport {
    pub input_format: String,
    pub output_format: String,
    pub n_heads: usize,
    pub d_in: usize,
    pub d_head: usize,
    pub d_latent: usize,
    pub d_latent_q: usize,
    pub key_value_error: f64,
    pub query_error: f64,
    pub reconstruction_error: f64,
    pub probe_tokens: usize,
    pub forward_max_deviation: f64,
}

pub fn render_text(r: &ConvertReport) -> String {
    format!(
        "converted {} -> {}: {} heads, d_in {}, d_head {}, d_L {}, d_LQ {}\n\
         reconstruction error (Frobenius): key/value {}, query {}, total {}\n\
         forward max deviation on {} seeded causal probe tokens: {}\n",
        r.input_format,
        r.output_format,
        r.n_heads,
        r.d_in,
        r.d_head,
        r.d_latent,
        r.d_latent_q,
        sci(r.key_value_error),
        sci(r.query_error),
        sci(r.reconstruction_error),
        r.probe_tokens,
        sci(r.forward_max_deviation),
    )
}

pub fn run(args: &ConvertArgs) -> Result<Outcome, Failure> {
    let bundle = WeightBundle::load(&args.input)?;
    let w = match &bundle {
        WeightBundle::Mha(w) => w,
        other => {
            return Err(Failure::Runtime(format!(
                "{}: expected an mha bundle, found {}",
                args.input.display(),
                other.format()
            )))
        }
    };
    let spec = bundle.mha_spec()?;
    let d_lq = args.d_lq.unwrap_or(spec.d_in);
    for (flag, v) in [("--d-l", args.d_l), ("--d-lq", d_lq)] {
        if v == 0 || v > spec.d_in {
            return Err(Failure::Usage(format!(
                "{flag} {v} out of range 1..={}",
                spec.d_in
            )));
        }
    }
    let (mla, err) = factorize_mha_to_mla(w, args.d_l, d_lq)?;
    let mla_spec = mla.infer_spec()?;
    let merged = merge_weights(&mla)?;
    let x = SeededRng::new(args.seed).uniform_matrix(PROBE_TOKENS, spec.d_in);
    let mask = MaskPolicy::causal();
    let reference = self_attention(&x, w, &spec, &mask)?;
    let converted = mla_forward(&x, &merged, &mla_spec, &mask)?;
    let out = WeightBundle::MlaMerged {
        weights: merged,
        d_head: mla_spec.d_head,
    };
    out.save(&args.output)?;
    let report = ConvertReport {
        input_format: bundle.format().to_string(),
        output_format: out.format().to_string(),
        n_heads: spec.n_heads,
        d_in: spec.d_in,
        d_head: spec.d_head,
        d_latent: args.d_l,
        d_latent_q: d_lq,
        key_value_error: err.key_value,
        query_error: err.query,
        reconstruction_error: err.total(),
        probe_tokens: PROBE_TOKENS,
        forward_max_deviation: reference.max_abs_diff(&converted)?,
    };
    let stdout = if args.json {
        to_json(&report)
    } else {
        render_text(&report)
    };
    Ok(Outcome {
        stdout,
        passed: true,
    })
}
