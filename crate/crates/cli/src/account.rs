use std::fs;

use attnlab_core::account::{
    account_preset, AttentionKind, ModelPreset, PresetReport, BUILTIN_PRESET_NAMES,
};

use crate::format::{thousands, to_json};
use crate::{AccountArgs, Failure, Outcome};

fn load_preset(args: &AccountArgs) -> Result<ModelPreset, Failure> {
    if let Some(name) = &args.preset {
        return ModelPreset::builtin(name).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown preset {name:?}; built-in presets: {}",
                BUILTIN_PRESET_NAMES.join(", ")
            ))
        });
    }
    let path = args
        .config
        .as_ref()
        .expect("clap requires --preset or --config");
    let json = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(ModelPreset::from_json(&json)?)
}

pub fn render_text(r: &PresetReport) -> String {
    let p = &r.preset;
    let mut out = format!("preset {} ({})\n", p.name, p.kind.label());
    let kv = p.n_kv_heads.map_or("-".to_string(), thousands_usize);
    let width_name = if p.kind == AttentionKind::Mla {
        "d_latent"
    } else {
        "d_head"
    };
    out.push_str(&format!(
        "  layers {}, heads {}, kv heads {}, d_model {}, {} {}\n",
        thousands_usize(p.n_layers),
        thousands_usize(p.n_heads),
        kv,
        thousands_usize(p.d_model),
        width_name,
        thousands_usize(p.d_head_or_latent)
    ));
    out.push_str(&format!(
        "  context {} tokens, {} bits per float\n",
        thousands_usize(r.context),
        r.bits_per_float
    ));
    let cache_label = if p.kind == AttentionKind::Mla {
        "latent_cache_floats_per_layer"
    } else {
        "kv_cache_floats_per_layer"
    };
    let rows = [
        (cache_label, r.cache_floats_per_layer),
        ("weight_floats_per_layer", r.weight_floats_per_layer),
        ("memory_floats_per_layer", r.memory_floats_per_layer),
        ("cache_bytes_per_layer", r.cache_bytes_per_layer),
        ("cache_bytes_total", r.cache_bytes_total),
        ("weight_floats_total", r.weight_floats_total),
        ("decode_step_flops", r.decode_step_flops),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$} = {}\n", thousands(v)));
    }
    let note = if p.kind == AttentionKind::Mla {
        "cache bytes = N_L x N_KV x d_L x bits / 8, where d_L is the latent width"
    } else {
        "cache bytes = 2 x N_L x N_h x N_KV x d x bits / 8, where N_h counts KV heads and d is the per-head width d_head"
    };
    out.push_str(&format!("note: {note}\n"));
    out
}

fn thousands_usize(n: usize) -> String {
    thousands(n as u64)
}

pub fn run(args: &AccountArgs) -> Result<Outcome, Failure> {
    let preset = load_preset(args)?;
    if args.bits == 0 {
        return Err(Failure::Usage("--bits must be at least 1".into()));
    }
    let report = account_preset(&preset, args.context, args.bits)?;
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
