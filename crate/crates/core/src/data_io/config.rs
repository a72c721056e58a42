//! `key = value` configuration text for [`TrainConfig`].
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors; omitted keys keep their defaults.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

macro_rules! for_each_key {
    ($cfg:ident, $apply:ident) => {{
        $apply!("rounds", $cfg.rounds);
        $apply!("epochs_per_round", $cfg.epochs_per_round);
        $apply!("batch_size", $cfg.batch_size);
        $apply!("base_lr", $cfg.base_lr);
        $apply!("lr_decay", $cfg.lr_decay);
        $apply!("lr_decay_start", $cfg.lr_decay_start);
        $apply!("lr_decay_every", $cfg.lr_decay_every);
        $apply!("momentum", $cfg.momentum);
        $apply!("eta", $cfg.eta);
        $apply!("tau", $cfg.tau);
        $apply!("k", $cfg.k);
        $apply!("ue_weight_step", $cfg.ue_weight_step);
        $apply!("ue_weight_every", $cfg.ue_weight_every);
        $apply!("use_aug_loss", $cfg.use_aug_loss);
        $apply!("loss_reduction", $cfg.loss_reduction);
        $apply!("augment", $cfg.augment);
        $apply!("crop_area_min", $cfg.policy.crop_area.0);
        $apply!("crop_area_max", $cfg.policy.crop_area.1);
        $apply!("crop_aspect_min", $cfg.policy.crop_aspect.0);
        $apply!("crop_aspect_max", $cfg.policy.crop_aspect.1);
        $apply!("flip_prob", $cfg.policy.flip_prob);
        $apply!("flip_enabled", $cfg.policy.flip_enabled);
        $apply!("grayscale_prob", $cfg.policy.grayscale_prob);
        $apply!("jitter_strength", $cfg.policy.jitter_strength);
        $apply!("hidden", $cfg.hidden);
        $apply!("embed_dim", $cfg.embed_dim);
        $apply!("seed", $cfg.seed);
        $apply!("checkpoint_every", $cfg.checkpoint_every);
        $apply!("synthetic_classes", $cfg.data.synthetic_classes);
        $apply!("synthetic_per_class", $cfg.data.synthetic_per_class);
        $apply!("synthetic_image_size", $cfg.data.synthetic_image_size);
        $apply!("synthetic_noise", $cfg.data.synthetic_noise);
        $apply!("synthetic_seed", $cfg.data.synthetic_seed);
        $apply!("holdout_per_class", $cfg.data.holdout_per_class);
        $apply!("data_limit", $cfg.data.limit);
    }};
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {raw:?} for {key}: {e}")))
}

/// Parses configuration text over the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = HashSet::new();
    for (n, raw_line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
        }
        let mut matched = false;
        macro_rules! apply {
            ($k:literal, $target:expr) => {
                if key == $k {
                    $target = parse_value(key, value, line_no)?;
                    matched = true;
                }
            };
        }
        for_each_key!(cfg, apply);
        if !matched {
            return Err(Error::Config(format!("line {line_no}: unknown key {key}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical text: every key, in a fixed order.
pub fn emit_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    macro_rules! apply {
        ($k:literal, $target:expr) => {
            out.push_str(&format!("{} = {}\n", $k, $target));
        };
    }
    for_each_key!(cfg, apply);
    out
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
