//! Training configuration and its layered `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::FieldMode;
use crate::renderer::SAMPLES_PER_RAY;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_mse: f64,
    /// Weight of the perceptual term; only used when a plugin is registered.
    pub lambda_lpips: f64,
    pub lambda_comp: f64,
    pub lr_mlp: f64,
    pub lr_vertices: f64,
    pub lr_grid: f64,
    pub beta: f64,
    /// Iterations over which the completeness weight ramps linearly from 0.
    pub comp_warmup: usize,
    pub iterations: usize,
    pub patch_size: usize,
    pub patches_per_step: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: FieldMode,
    pub attention: bool,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub density_bias: f64,
    pub grid_levels: usize,
    pub grid_table_log2: u32,
    pub grid_features: usize,
    pub grid_base_resolution: usize,
    pub grid_max_resolution: usize,
    /// Also supervise unoccluded pixels outside the subject mask.
    pub supervise_background: bool,
    /// Composite predictions over a random color per step; pixels outside
    /// the subject mask then take that color as their target.
    pub random_background: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 0.2,
            lambda_lpips: 1.0,
            lambda_comp: 10.0,
            lr_mlp: 5e-4,
            lr_vertices: 1e-4,
            lr_grid: 5e-5,
            beta: 10.0,
            comp_warmup: 0,
            iterations: 2000,
            patch_size: 32,
            patches_per_step: 4,
            samples: SAMPLES_PER_RAY,
            seed: 0,
            mode: FieldMode::Surface,
            attention: true,
            mlp_layers: 4,
            mlp_width: 64,
            density_bias: 0.1,
            grid_levels: 8,
            grid_table_log2: 14,
            grid_features: 2,
            grid_base_resolution: 4,
            grid_max_resolution: 128,
            supervise_background: true,
            random_background: true,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for {key}, got {value:?}"))),
    }
}

/// Splits layered config text into `(line, key, value)` triples. Blank lines
/// and `#` comments are skipped.
pub fn key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
        };
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_mse" => self.lambda_mse = parse(key, value)?,
            "lambda_lpips" => self.lambda_lpips = parse(key, value)?,
            "lambda_comp" => self.lambda_comp = parse(key, value)?,
            "lr_mlp" => self.lr_mlp = parse(key, value)?,
            "lr_vertices" => self.lr_vertices = parse(key, value)?,
            "lr_grid" => self.lr_grid = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "comp_warmup" => self.comp_warmup = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "patches_per_step" => self.patches_per_step = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "surface" => {
                self.mode = if parse_bool(key, value)? {
                    FieldMode::Surface
                } else {
                    FieldMode::Point
                }
            }
            "attention" => self.attention = parse_bool(key, value)?,
            "mlp_layers" => self.mlp_layers = parse(key, value)?,
            "mlp_width" => self.mlp_width = parse(key, value)?,
            "density_bias" => self.density_bias = parse(key, value)?,
            "grid_levels" => self.grid_levels = parse(key, value)?,
            "grid_table_log2" => self.grid_table_log2 = parse(key, value)?,
            "grid_features" => self.grid_features = parse(key, value)?,
            "grid_base_resolution" => self.grid_base_resolution = parse(key, value)?,
            "grid_max_resolution" => self.grid_max_resolution = parse(key, value)?,
            "supervise_background" => self.supervise_background = parse_bool(key, value)?,
            "random_background" => self.random_background = parse_bool(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, k, v) in key_values(text)? {
            self.set(&k, &v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lambda_mse", self.lambda_mse.to_string());
        put("lambda_lpips", self.lambda_lpips.to_string());
        put("lambda_comp", self.lambda_comp.to_string());
        put("lr_mlp", self.lr_mlp.to_string());
        put("lr_vertices", self.lr_vertices.to_string());
        put("lr_grid", self.lr_grid.to_string());
        put("beta", self.beta.to_string());
        put("comp_warmup", self.comp_warmup.to_string());
        put("iterations", self.iterations.to_string());
        put("patch_size", self.patch_size.to_string());
        put("patches_per_step", self.patches_per_step.to_string());
        put("samples", self.samples.to_string());
        put("seed", self.seed.to_string());
        put("surface", (self.mode == FieldMode::Surface).to_string());
        put("attention", self.attention.to_string());
        put("mlp_layers", self.mlp_layers.to_string());
        put("mlp_width", self.mlp_width.to_string());
        put("density_bias", self.density_bias.to_string());
        put("grid_levels", self.grid_levels.to_string());
        put("grid_table_log2", self.grid_table_log2.to_string());
        put("grid_features", self.grid_features.to_string());
        put("grid_base_resolution", self.grid_base_resolution.to_string());
        put("grid_max_resolution", self.grid_max_resolution.to_string());
        put("supervise_background", self.supervise_background.to_string());
        put("random_background", self.random_background.to_string());
        put("log_every", self.log_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Completeness weight in effect at a 0-based iteration.
    pub fn comp_weight(&self, iteration: usize) -> f64 {
        if iteration >= self.comp_warmup {
            self.lambda_comp
        } else {
            self.lambda_comp * iteration as f64 / self.comp_warmup as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let lambdas = [self.lambda_mse, self.lambda_lpips, self.lambda_comp];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        let lrs = [self.lr_mlp, self.lr_vertices, self.lr_grid];
        if lrs.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if self.patch_size == 0 || self.patches_per_step == 0 || self.samples == 0 {
            return bad("patch size, patch count and samples must be positive");
        }
        if self.mlp_width == 0 {
            return bad("MLP width must be positive");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log and checkpoint intervals must be positive");
        }
        if self.grid_table_log2 > 31 {
            return bad("hash table size must be at most 2^31");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("lr_mlp = 1e-3\nsurface = false # baseline\n\n# comment\nseed=7").unwrap();
        assert_eq!(c.lr_mlp, 1e-3);
        assert_eq!(c.mode, FieldMode::Point);
        assert_eq!(c.seed, 7);
        let mut d = TrainConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn later_layers_win() {
        let mut c = TrainConfig::default();
        c.apply_text("iterations = 10").unwrap();
        c.apply_text("iterations = 20").unwrap();
        assert_eq!(c.iterations, 20);
    }

    #[test]
    fn bad_input_is_reported_with_line() {
        let mut c = TrainConfig::default();
        let e = c.apply_text("seed = 1\nnope = 3").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("nope"), "{e}");
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("attention = maybe").is_err());
        let mut neg = TrainConfig::default();
        neg.lambda_comp = -1.0;
        assert!(neg.validate().is_err());
        let mut lr = TrainConfig::default();
        lr.lr_grid = 0.0;
        assert!(lr.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
