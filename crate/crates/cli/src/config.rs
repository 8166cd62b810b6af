//! Text configuration files: one `key = value` pair per line, `#` comments.
//! Every model/training hyperparameter is addressable; unknown keys are
//! rejected by name. Keys omitted from the file keep their defaults.

use std::fs;
use std::path::Path;

use crate::error::{contract, Result};
use mmer_core::fusion::FusionOrder;
use mmer_core::model::ModelConfig;

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(contract(format!(
                "config line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        apply_key(&mut config, key.trim(), value.trim())
            .map_err(|e| contract(format!("config line {}: {e}", lineno + 1)))?;
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| contract(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn apply_key(config: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn usize_of(key: &str, v: &str) -> std::result::Result<usize, String> {
        v.parse::<usize>()
            .map_err(|_| format!("{key}: expected a non-negative integer, got {v:?}"))
    }
    fn u64_of(key: &str, v: &str) -> std::result::Result<u64, String> {
        v.parse::<u64>()
            .map_err(|_| format!("{key}: expected a non-negative integer, got {v:?}"))
    }
    fn f64_of(key: &str, v: &str) -> std::result::Result<f64, String> {
        v.parse::<f64>()
            .map_err(|_| format!("{key}: expected a number, got {v:?}"))
    }
    fn bool_of(key: &str, v: &str) -> std::result::Result<bool, String> {
        match v {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(format!("{key}: expected a boolean, got {v:?}")),
        }
    }

    match key {
        "model_dim" => config.model_dim = usize_of(key, value)?,
        "label_attn_heads" => config.label_attn_heads = usize_of(key, value)?,
        "decoder_heads" => config.decoder_heads = usize_of(key, value)?,
        "encoder_heads" => config.encoder_heads = usize_of(key, value)?,
        "visual_layers" => config.visual_layers = usize_of(key, value)?,
        "audio_layers" => config.audio_layers = usize_of(key, value)?,
        "text_layers" => config.text_layers = usize_of(key, value)?,
        "fusion_layers" => config.fusion_layers = usize_of(key, value)?,
        "ffn_multiplier" => config.ffn_multiplier = usize_of(key, value)?,
        "refine_hidden_layers" => config.refine_hidden_layers = usize_of(key, value)?,
        "alpha" => config.alpha = f64_of(key, value)?,
        "beta" => config.beta = f64_of(key, value)?,
        "gamma" => config.gamma = f64_of(key, value)?,
        "batch_size" => config.batch_size = usize_of(key, value)?,
        "base_lr" => config.base_lr = f64_of(key, value)?,
        "warmup_fraction" => config.warmup_fraction = f64_of(key, value)?,
        "epochs" => config.epochs = usize_of(key, value)?,
        "patience" => config.patience = usize_of(key, value)?,
        "seed" => config.seed = u64_of(key, value)?,
        "dropout" => config.dropout = f64_of(key, value)?,
        "common_len" => {
            config.common_len = if value == "min" {
                None
            } else {
                Some(usize_of(key, value)?)
            }
        }
        "scalar_token_embeddings" => config.scalar_token_embeddings = bool_of(key, value)?,
        "per_position_discriminator_bias" => {
            config.per_position_discriminator_bias = bool_of(key, value)?
        }
        "printed_diff_sign" => config.printed_diff_sign = bool_of(key, value)?,
        "subset_accuracy" => config.subset_accuracy = bool_of(key, value)?,
        "disable_amr" => config.ablation.disable_amr = bool_of(key, value)?,
        "disable_diff" => config.ablation.disable_diff = bool_of(key, value)?,
        "disable_cml" => config.ablation.disable_cml = bool_of(key, value)?,
        "fusion_order" => {
            config.ablation.fusion_order =
                FusionOrder::parse(value).map_err(|e| format!("fusion_order: {e}"))?
        }
        "disable_token_embeddings" => {
            config.ablation.disable_token_embeddings = bool_of(key, value)?
        }
        "identical_head" => config.ablation.identical_head = bool_of(key, value)?,
        "disable_label_correlation" => {
            config.ablation.disable_label_correlation = bool_of(key, value)?
        }
        "disable_label_modal_attention" => {
            config.ablation.disable_label_modal_attention = bool_of(key, value)?
        }
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

/// The default configuration rendered as a parseable file.
pub fn render_default() -> String {
    let c = ModelConfig::default();
    format!(
        "# model architecture\n\
         model_dim = {}\n\
         label_attn_heads = {}\n\
         decoder_heads = {}\n\
         encoder_heads = {}\n\
         visual_layers = {}\n\
         audio_layers = {}\n\
         text_layers = {}\n\
         fusion_layers = {}\n\
         ffn_multiplier = {}\n\
         refine_hidden_layers = {}\n\
         \n# objective weights\n\
         alpha = {}\n\
         beta = {}\n\
         gamma = {}\n\
         \n# optimization\n\
         batch_size = {}\n\
         base_lr = {}\n\
         warmup_fraction = {}\n\
         epochs = {}\n\
         patience = {}\n\
         seed = {}\n\
         dropout = {}\n\
         \n# variants\n\
         common_len = min\n\
         scalar_token_embeddings = {}\n\
         per_position_discriminator_bias = {}\n\
         printed_diff_sign = {}\n\
         subset_accuracy = {}\n\
         \n# ablation switches\n\
         disable_amr = {}\n\
         disable_diff = {}\n\
         disable_cml = {}\n\
         fusion_order = {}\n\
         disable_token_embeddings = {}\n\
         identical_head = {}\n\
         disable_label_correlation = {}\n\
         disable_label_modal_attention = {}\n",
        c.model_dim,
        c.label_attn_heads,
        c.decoder_heads,
        c.encoder_heads,
        c.visual_layers,
        c.audio_layers,
        c.text_layers,
        c.fusion_layers,
        c.ffn_multiplier,
        c.refine_hidden_layers,
        c.alpha,
        c.beta,
        c.gamma,
        c.batch_size,
        c.base_lr,
        c.warmup_fraction,
        c.epochs,
        c.patience,
        c.seed,
        c.dropout,
        c.scalar_token_embeddings,
        c.per_position_discriminator_bias,
        c.printed_diff_sign,
        c.subset_accuracy,
        c.ablation.disable_amr,
        c.ablation.disable_diff,
        c.ablation.disable_cml,
        c.ablation.fusion_order,
        c.ablation.disable_token_embeddings,
        c.ablation.identical_head,
        c.ablation.disable_label_correlation,
        c.ablation.disable_label_modal_attention,
    )
}
