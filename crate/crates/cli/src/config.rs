//! Run configuration: `key = value` files with `#` comments, strict keys,
//! validated defaults, and a round-trippable echo.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use moelab_core::model::{BetaSpec, ModelConfig, Variant};
use moelab_core::routing::RouterMode;
use moelab_core::{Error, Result};

/// Everything one training/eval run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Corpus file; required by `train`.
    pub corpus: Option<PathBuf>,
    /// Validation fraction taken from the tail of the corpus.
    pub split: f64,
    pub steps: u64,
    pub warmup: u64,
    pub max_lr: f64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            corpus: None,
            split: 0.1,
            steps: 3000,
            warmup: 100,
            max_lr: 3e-4,
            batch_size: 16,
            eval_interval: 250,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!(
                "split must be in (0, 1), got {}",
                self.split
            )));
        }
        if self.steps < self.warmup {
            return Err(Error::Config(format!(
                "steps ({}) must be >= warmup ({})",
                self.steps, self.warmup
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.max_lr < 0.0 {
            return Err(Error::Config(format!("max_lr must be >= 0, got {}", self.max_lr)));
        }
        Ok(())
    }

    /// Echo in `key = value` form; parses back to an identical config.
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let beta = match m.beta {
            BetaSpec::Auto => "auto".to_string(),
            BetaSpec::Fixed(b) => format!("{b}"),
        };
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "variant = {}", m.variant.as_str());
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "d = {}", m.d);
        let _ = writeln!(s, "n_blocks = {}", m.n_blocks);
        let _ = writeln!(s, "n_attn_heads = {}", m.n_attn_heads);
        let _ = writeln!(s, "context = {}", m.context);
        let _ = writeln!(s, "moe_every = {}", m.moe_every);
        let _ = writeln!(s, "n_experts = {}", m.n_experts);
        let _ = writeln!(s, "k = {}", m.k);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "beta = {beta}");
        let _ = writeln!(s, "alpha = {}", m.alpha);
        let _ = writeln!(
            s,
            "router_mode = {}",
            match m.router_mode {
                RouterMode::Direct => "direct",
                RouterMode::Reduced => "reduced",
            }
        );
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "# run");
        if let Some(c) = &self.corpus {
            let _ = writeln!(s, "corpus = {}", c.display());
        }
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "max_lr = {}", self.max_lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}

/// Parse a config file. Unknown keys, malformed lines and type errors are
/// rejected with the offending key and line number.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line_no}: expected `key = value`, got {raw:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, key, value)
            .map_err(|e| Error::Config(format!("line {line_no}: key '{key}': {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn int<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
        v.parse::<T>().map_err(|_| format!("invalid integer {v:?}"))
    }
    fn float(v: &str) -> std::result::Result<f64, String> {
        v.parse::<f64>().map_err(|_| format!("invalid number {v:?}"))
    }
    match key {
        "vocab_size" => cfg.model.vocab_size = int(value)?,
        "d" => cfg.model.d = int(value)?,
        "n_blocks" => cfg.model.n_blocks = int(value)?,
        "n_attn_heads" => cfg.model.n_attn_heads = int(value)?,
        "context" => cfg.model.context = int(value)?,
        "moe_every" => cfg.model.moe_every = int(value)?,
        "n_experts" => cfg.model.n_experts = int(value)?,
        "k" => cfg.model.k = int(value)?,
        "heads" => cfg.model.heads = int(value)?,
        "beta" => {
            cfg.model.beta = if value == "auto" {
                BetaSpec::Auto
            } else {
                BetaSpec::Fixed(float(value)?)
            }
        }
        "alpha" => cfg.model.alpha = float(value)?,
        "variant" => {
            cfg.model.variant = match value {
                "dense" => Variant::Dense,
                "smoe" => Variant::Smoe,
                "mhmoe" => Variant::Mhmoe,
                other => return Err(format!("unknown variant {other:?} (dense|smoe|mhmoe)")),
            }
        }
        "router_mode" => {
            cfg.model.router_mode = match value {
                "direct" => RouterMode::Direct,
                "reduced" => RouterMode::Reduced,
                other => return Err(format!("unknown router_mode {other:?} (direct|reduced)")),
            }
        }
        "seed" => cfg.model.seed = int(value)?,
        "corpus" => cfg.corpus = Some(PathBuf::from(value)),
        "split" => cfg.split = float(value)?,
        "steps" => cfg.steps = int(value)?,
        "warmup" => cfg.warmup = int(value)?,
        "max_lr" => cfg.max_lr = float(value)?,
        "batch_size" => cfg.batch_size = int(value)?,
        "eval_interval" => cfg.eval_interval = int(value)?,
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        other => return Err(format!("unknown key '{other}'")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults_and_echo_round_trips() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echoed = cfg.to_config_string();
        let back = parse_config_str(&echoed).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn indivisible_heads_rejected_naming_both() {
        let err = parse_config_str("variant = mhmoe\nd = 128\nheads = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("128") && err.contains("3"), "{err}");
    }

    #[test]
    fn auto_beta_parses_and_resolves_at_build() {
        let cfg = parse_config_str("variant = mhmoe\nbeta = auto\nd = 64\nheads = 4\n").unwrap();
        assert_eq!(cfg.model.beta, BetaSpec::Auto);
        let model = moelab_core::model::build_model(&cfg.model).unwrap();
        assert!(model.beta > 1.0, "auto beta resolved to {}", model.beta);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = parse_config_str("d = 64\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn type_error_names_key_and_line() {
        let err = parse_config_str("\nd = twelve\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("'d'"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config_str("# hello\n\nd = 32 # inline\n").unwrap();
        assert_eq!(cfg.model.d, 32);
    }

    #[test]
    fn run_invariants_checked() {
        assert!(parse_config_str("split = 1.5\n").is_err());
        assert!(parse_config_str("steps = 5\nwarmup = 10\n").is_err());
        assert!(parse_config_str("batch_size = 0\n").is_err());
    }

    #[test]
    fn non_default_echo_round_trips() {
        let text = "variant = mhmoe\nbeta = 2.5\nrouter_mode = reduced\nd = 64\nheads = 2\n\
                    corpus = data/c.txt\nsplit = 0.2\nsteps = 10\nwarmup = 2\nmax_lr = 0.001\n\
                    batch_size = 4\neval_interval = 5\nout_dir = runs/x\nseed = 9\n";
        let cfg = parse_config_str(text).unwrap();
        let back = parse_config_str(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
