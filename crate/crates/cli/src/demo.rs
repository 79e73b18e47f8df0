use std::fs;

use serde::{Deserialize, Serialize};

use attnlab_core::attention::{attend_traced, HeadWeights, Kernel, MaskPolicy};
use attnlab_core::rng::SeededRng;
use attnlab_core::tokenizer::{embed, load_vocab_json, tokenize_words, EmbeddingTable, Vocabulary};
use attnlab_core::Matrix;

use crate::format::{matrix_block, to_json};
use crate::{DemoArgs, DemoKernel, Failure, Outcome};

const DEMO_WORDS: [&str; 16] = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "cat", "sat", "on", "mat",
    "is", "and", "an", "to",
];
const DEMO_DIM: usize = 4;

/// Every stage of the walk-through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTrace {
    pub text: String,
    pub kernel: String,
    pub causal: bool,
    pub tokens: Vec<String>,
    pub indices: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Demo words plus the letters `a` to `z`; nonnegative seeded embeddings so
/// the linear kernel also gives positive row sums.
fn default_model(seed: u64) -> Result<(Vocabulary, EmbeddingTable), Failure> {
    let letters = ('a'..='z').map(String::from);
    let vocab = Vocabulary::new(DEMO_WORDS.iter().map(|w| w.to_string()).chain(letters))?;
    let mut rng = SeededRng::new(seed);
    let m = Matrix::from_fn(vocab.len(), DEMO_DIM, |_, _| rng.uniform(0.0, 1.0));
    let table = EmbeddingTable::new(m, vocab.len())?;
    Ok((vocab, table))
}

fn head_weights(dim: usize, seed: u64) -> Result<HeadWeights, Failure> {
    let mut rng = SeededRng::new(seed ^ 0x0A77_E2D0);
    let mut m = || Matrix::from_fn(dim, dim, |_, _| rng.uniform(0.0, 1.0));
    let (wq, wk, wv) = (m(), m(), m());
    Ok(HeadWeights::new(wq, wk, wv)?)
}

pub fn trace(args: &DemoArgs) -> Result<DemoTrace, Failure> {
    let (vocab, table) = match &args.config {
        Some(path) => {
            let json = fs::read_to_string(path)
                .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
            load_vocab_json(&json)?
        }
        None => default_model(args.seed)?,
    };
    let indices = tokenize_words(&args.text, &vocab, vocab.max_token_chars())?;
    let tokens = indices
        .iter()
        .map(|&i| vocab.token(i).unwrap_or_default().to_string())
        .collect();
    let x = embed(&indices, &table)?;
    let kernel = match args.kernel {
        DemoKernel::ScaledExp => Kernel::scaled_exp(table.dim())?,
        DemoKernel::Linear => Kernel::Linear,
    };
    let mut trace = DemoTrace {
        text: args.text.clone(),
        kernel: kernel.name().to_string(),
        causal: args.causal,
        tokens,
        indices,
        embeddings: x.to_rows(),
        scores: Vec::new(),
        weights: Vec::new(),
        outputs: Vec::new(),
    };
    if x.rows() == 0 {
        return Ok(trace);
    }
    let mask = if args.causal {
        MaskPolicy::causal()
    } else {
        MaskPolicy::None
    };
    let w = head_weights(table.dim(), args.seed)?;
    let t = attend_traced(&x, &x, &x, &w, &kernel, &mask)?;
    trace.scores = t.scores.to_rows();
    trace.weights = t.weights.to_rows();
    trace.outputs = t.output.to_rows();
    Ok(trace)
}

pub fn render_text(t: &DemoTrace) -> String {
    let mut out = format!("text: {:?}\n", t.text);
    if t.tokens.is_empty() {
        out.push_str("tokens: 0 (empty trace)\n");
        return out;
    }
    let n = t.tokens.len();
    out.push_str(&format!("tokens: {n}\n"));
    let labels: Vec<String> = t
        .tokens
        .iter()
        .zip(&t.indices)
        .map(|(tok, i)| format!("{tok} [{i}]"))
        .collect();
    let dim = t.embeddings.first().map_or(0, Vec::len);
    out.push_str(&format!("embeddings X ({n} x {dim}):\n"));
    out.push_str(&matrix_block(&labels, &t.embeddings));
    let mask = if t.causal { "causal" } else { "none" };
    out.push_str(&format!("kernel: {}, mask: {mask}\n", t.kernel));
    out.push_str(&format!("scores A ({n} x {n}):\n"));
    out.push_str(&matrix_block(&labels, &t.scores));
    out.push_str(&format!("weights Z^-1 A ({n} x {n}):\n"));
    out.push_str(&matrix_block(&labels, &t.weights));
    let sums: Vec<String> = t
        .weights
        .iter()
        .map(|r| format!("{:.6}", r.iter().sum::<f64>()))
        .collect();
    out.push_str(&format!("row sums: {}\n", sums.join(" ")));
    let dv = t.outputs.first().map_or(0, Vec::len);
    out.push_str(&format!("outputs Y ({n} x {dv}):\n"));
    out.push_str(&matrix_block(&labels, &t.outputs));
    out
}

pub fn run(args: &DemoArgs) -> Result<Outcome, Failure> {
    let t = trace(args)?;
    let stdout = if args.json {
        to_json(&t)
    } else {
        render_text(&t)
    };
    Ok(Outcome {
        stdout,
        passed: true,
    })
}
