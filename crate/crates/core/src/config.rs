//! Flat key=value run configuration files.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected. The
//! same format configures training runs and synthetic dataset generation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synth::SynthSpec;
use crate::train::{TrainConfig, Variant};

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::config(format!("key '{key}': expected a boolean, got '{other}'"))),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(f32, f32)> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!("key '{key}': expected 'lo,hi'")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_f32_list(key: &str, value: &str) -> Result<Vec<f32>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

/// Key=value lines with comments and blanks stripped.
fn lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                return Err(Error::config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Apply one training key. Returns an error for unknown keys.
pub fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "variant" => cfg.variant = Variant::parse(value)?,
        "classes" => cfg.classes = parse_num(key, value)?,
        "image_channels" => cfg.image_channels = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "lr" => cfg.lr = parse_num(key, value)?,
        "max_iters" => cfg.max_iters = parse_num(key, value)?,
        "clip_c" => {
            cfg.clip_c = if value == "off" {
                None
            } else {
                Some(parse_num(key, value)?)
            }
        }
        "seed" => cfg.seed = parse_num(key, value)?,
        "base_feature_maps" => cfg.base_feature_maps = parse_num(key, value)?,
        "eval_every" => cfg.eval_every = parse_num(key, value)?,
        "crop" => cfg.crop = parse_num(key, value)?,
        "include_input_scale" => cfg.include_input_scale = parse_bool(key, value)?,
        other => return Err(Error::config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

/// Parse a training config starting from desk-scale defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk_defaults();
    for (k, v) in lines(text)? {
        apply_train_key(&mut cfg, &k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_to_text(cfg: &TrainConfig) -> String {
    format!(
        "variant={}\nclasses={}\nimage_channels={}\nbatch_size={}\nlr={}\nmax_iters={}\nclip_c={}\nseed={}\nbase_feature_maps={}\neval_every={}\ncrop={}\ninclude_input_scale={}\n",
        cfg.variant.name(),
        cfg.classes,
        cfg.image_channels,
        cfg.batch_size,
        cfg.lr,
        cfg.max_iters,
        cfg.clip_c.map(|c| c.to_string()).unwrap_or_else(|| "off".to_string()),
        cfg.seed,
        cfg.base_feature_maps,
        cfg.eval_every,
        cfg.crop,
        cfg.include_input_scale,
    )
}

fn apply_synth_key(spec: &mut SynthSpec, key: &str, value: &str) -> Result<()> {
    match key {
        "size" => spec.size = parse_num(key, value)?,
        "depth" => spec.depth = parse_num(key, value)?,
        "channels" => spec.channels = parse_num(key, value)?,
        "classes" => spec.classes = parse_num(key, value)?,
        "intensity_offsets" => {
            spec.intensity_offsets = value
                .split(';')
                .map(|row| parse_f32_list(key, row))
                .collect::<Result<_>>()?
        }
        "background" => spec.background = parse_f32_list(key, value)?,
        "noise_sigma" => spec.noise_sigma = parse_num(key, value)?,
        "radius_frac" => spec.radius_frac = parse_pair(key, value)?,
        "shrink" => spec.shrink = parse_pair(key, value)?,
        "center_jitter_frac" => spec.center_jitter_frac = parse_num(key, value)?,
        "distractors" => spec.distractors = parse_num(key, value)?,
        "train" => spec.train = parse_num(key, value)?,
        "val" => spec.val = parse_num(key, value)?,
        "test" => spec.test = parse_num(key, value)?,
        "seed" => spec.seed = parse_num(key, value)?,
        other => return Err(Error::config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

/// Parse a synthetic dataset spec starting from the defaults.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for (k, v) in lines(text)? {
        apply_synth_key(&mut spec, &k, &v)?;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn synth_spec_to_text(spec: &SynthSpec) -> String {
    let offsets = spec
        .intensity_offsets
        .iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";");
    let background = spec
        .background
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "size={}\ndepth={}\nchannels={}\nclasses={}\nintensity_offsets={offsets}\nbackground={background}\nnoise_sigma={}\nradius_frac={},{}\nshrink={},{}\ncenter_jitter_frac={}\ndistractors={}\ntrain={}\nval={}\ntest={}\nseed={}\n",
        spec.size,
        spec.depth,
        spec.channels,
        spec.classes,
        spec.noise_sigma,
        spec.radius_frac.0,
        spec.radius_frac.1,
        spec.shrink.0,
        spec.shrink.1,
        spec.center_jitter_frac,
        spec.distractors,
        spec.train,
        spec.val,
        spec.test,
        spec.seed,
    )
}

/// Every documented key with its paper-scale and desk-scale defaults.
pub fn print_defaults() -> String {
    let paper = TrainConfig::paper_defaults();
    let desk = TrainConfig::desk_defaults();
    let synth = SynthSpec::default();
    let mut out = String::new();
    out.push_str("# training keys (paper-scale defaults)\n");
    out.push_str(&train_config_to_text(&paper));
    out.push_str("\n# training keys (desk-scale defaults)\n");
    out.push_str(&train_config_to_text(&desk));
    out.push_str("\n# synthetic dataset keys (defaults)\n");
    out.push_str(&synth_spec_to_text(&synth));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_roundtrip() {
        let cfg = TrainConfig {
            variant: Variant::S3_1C,
            lr: 0.00002,
            clip_c: None,
            ..TrainConfig::desk_defaults()
        };
        let text = train_config_to_text(&cfg);
        let back = parse_train_config(&text).unwrap();
        assert_eq!(back.variant, Variant::S3_1C);
        assert_eq!(back.lr, 0.00002);
        assert_eq!(back.clip_c, None);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_train_config("variant=s3_3c\nbogus=1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'bogus'"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_train_config("# comment\n\nbatch_size=4 # trailing\n").unwrap();
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn synth_spec_roundtrip() {
        let spec = SynthSpec {
            size: 32,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let text = synth_spec_to_text(&spec);
        let back = parse_synth_spec(&text).unwrap();
        assert_eq!(back.size, 32);
        assert_eq!(back.noise_sigma, 0.0);
        assert_eq!(back.intensity_offsets, spec.intensity_offsets);
    }

    #[test]
    fn defaults_listing_covers_both_scales() {
        let text = print_defaults();
        assert!(text.contains("batch_size=64"));
        assert!(text.contains("batch_size=16"));
        assert!(text.contains("lr=0.00002"));
    }
}
