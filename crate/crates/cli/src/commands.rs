//! The four command surfaces: train, eval, budget, report.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use moelab_core::budget::{self, BetaSolution};
use moelab_core::model::{
    build_model, param_manifest, train_step, EvalOutcome, Model, OptimizerConfig, OptimizerState,
    Variant,
};
use moelab_core::rng::SeededRng;
use moelab_core::telemetry::{
    activation_percentage, activation_ratios, default_threshold,
    write_activation_csv, write_activation_pgm, Normalization,
};
use moelab_core::{Error, Result};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, split_corpus};

/// One metrics-log record; a JSON line per eval interval.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub train_task_loss: Option<f64>,
    pub train_balance_loss: Option<f64>,
    pub val_ppl: f64,
    pub val_task_loss: f64,
    pub soft_balance: f64,
    pub activation_pct: Vec<f64>,
    pub activation_overall: f64,
    pub activation_threshold: f64,
}

impl MetricsRecord {
    /// Fixed key order and shortest-round-trip floats keep the log
    /// byte-reproducible across identical runs.
    pub fn to_json_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x}"));
        let mut line = String::new();
        let _ = write!(
            line,
            "{{\"step\":{},\"lr\":{},\"train_task_loss\":{},\"train_balance_loss\":{},\"val_ppl\":{},\"val_task_loss\":{},\"soft_balance\":{},\"activation_pct\":[",
            self.step,
            self.lr,
            opt(self.train_task_loss),
            opt(self.train_balance_loss),
            self.val_ppl,
            self.val_task_loss,
            self.soft_balance,
        );
        for (i, v) in self.activation_pct.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v}");
        }
        let _ = write!(
            line,
            "],\"activation_overall\":{},\"activation_threshold\":{}}}",
            self.activation_overall, self.activation_threshold
        );
        line
    }
}

/// Result of a completed training run.
#[derive(Debug)]
pub struct TrainSummary {
    pub final_step: u64,
    pub final_val_ppl: f64,
    pub final_activation_overall: f64,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub beta: f64,
}

fn eval_metrics(model: &Model, val: &[u16], batch: usize) -> Result<(EvalOutcome, Vec<f64>, f64, f64)> {
    let outcome = model.evaluate(val, batch)?;
    if outcome.logs.is_empty() {
        return Ok((outcome, Vec::new(), 0.0, 0.0));
    }
    let matrix = activation_ratios(&outcome.logs, Normalization::PerEvent)?;
    let threshold = default_threshold(model.config.n_experts);
    let (per_layer, overall) = activation_percentage(&matrix, threshold)?;
    Ok((outcome, per_layer, overall, threshold))
}

/// Train per the config; optionally resume from a checkpoint. Returns the
/// summary on success. A non-finite loss aborts with the last periodic
/// checkpoint intact.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cmd_train_until(config, resume, None)
}

/// [`cmd_train`] that stops early after `stop_after` steps (checkpointing
/// at the stop), simulating an interrupted run for resume tests.
pub fn cmd_train_until(
    config: &RunConfig,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainSummary> {
    config.validate()?;
    let corpus_path = config
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("train: config has no corpus path".into()))?;
    let tokens = load_corpus(corpus_path)?;
    let (train, val) = split_corpus(&tokens, config.split)?;
    let window = config.model.context + 1;
    if train.len() < window {
        return Err(Error::Data(format!(
            "train split has {} tokens; need at least context+1 = {window}",
            train.len()
        )));
    }

    std::fs::create_dir_all(&config.out_dir)?;
    let metrics_path = config.out_dir.join("metrics.jsonl");
    let last_ckpt = config.out_dir.join("last.ckpt");
    let final_ckpt = config.out_dir.join("final.ckpt");

    let (mut model, mut opt, mut rng, start_step, fresh) = match resume {
        Some(path) => {
            let cp = checkpoint::load(path)?;
            if cp.config.model != config.model {
                return Err(Error::Config(
                    "resume: checkpoint model config differs from the requested config".into(),
                ));
            }
            (cp.model, cp.optimizer, cp.rng, cp.step, false)
        }
        None => {
            let model = build_model(&config.model)?;
            let opt = OptimizerState::new(
                &model,
                OptimizerConfig::new(config.max_lr, config.warmup, config.steps),
            );
            let rng = SeededRng::new(config.model.seed);
            (model, opt, rng, 0, true)
        }
    };

    // Echo the resolved config next to the outputs.
    std::fs::write(config.out_dir.join("config.txt"), config.to_config_string())?;

    // fresh runs start a fresh log; resumed runs append to it
    let mut metrics_file = if fresh {
        OpenOptions::new().create(true).write(true).truncate(true).open(&metrics_path)?
    } else {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    };

    let write_record = |file: &mut std::fs::File,
                            model: &Model,
                            step: u64,
                            lr: f64,
                            train_loss: Option<(f64, f64)>|
     -> Result<(f64, f64)> {
        let (outcome, per_layer, overall, threshold) = eval_metrics(model, val, config.batch_size)?;
        let record = MetricsRecord {
            step,
            lr,
            train_task_loss: train_loss.map(|t| t.0),
            train_balance_loss: train_loss.map(|t| t.1),
            val_ppl: outcome.perplexity,
            val_task_loss: outcome.cross_entropy,
            soft_balance: outcome.soft_balance,
            activation_pct: per_layer,
            activation_overall: overall,
            activation_threshold: threshold,
        };
        writeln!(file, "{}", record.to_json_line())?;
        file.flush()?;
        Ok((outcome.perplexity, overall))
    };

    let mut last_eval = if fresh {
        let initial = write_record(&mut metrics_file, &model, 0, 0.0, None)?;
        let cp = Checkpoint {
            config: config.clone(),
            model,
            optimizer: opt,
            step: 0,
            rng,
        };
        checkpoint::save(&last_ckpt, &cp)?;
        let Checkpoint {
            model: m, optimizer: o, rng: r, ..
        } = cp;
        model = m;
        opt = o;
        rng = r;
        initial
    } else {
        (f64::NAN, 0.0)
    };

    let max_start = train.len() - window;
    let mut reached = start_step;
    for step in (start_step + 1)..=config.steps {
        let batch: Vec<Vec<u16>> = (0..config.batch_size)
            .map(|_| {
                let s = rng.below(max_start + 1);
                train[s..s + window].to_vec()
            })
            .collect();
        let metrics = train_step(&mut model, &batch, &mut opt)?;
        reached = step;

        let stopping = stop_after == Some(step);
        if step % config.eval_interval == 0 || step == config.steps || stopping {
            last_eval = write_record(
                &mut metrics_file,
                &model,
                step,
                metrics.lr,
                Some((metrics.task_loss, metrics.balance_loss)),
            )?;
            let cp = Checkpoint {
                config: config.clone(),
                model,
                optimizer: opt,
                step,
                rng,
            };
            checkpoint::save(&last_ckpt, &cp)?;
            let Checkpoint {
                model: m, optimizer: o, rng: r, ..
            } = cp;
            model = m;
            opt = o;
            rng = r;
        }
        if stopping {
            break;
        }
    }

    let beta = model.beta;
    let finished = reached == config.steps;
    if finished {
        let cp = Checkpoint {
            config: config.clone(),
            model,
            optimizer: opt,
            step: config.steps,
            rng,
        };
        checkpoint::save(&final_ckpt, &cp)?;
        checkpoint::save(&last_ckpt, &cp)?;
    }

    Ok(TrainSummary {
        final_step: reached,
        final_val_ppl: last_eval.0,
        final_activation_overall: last_eval.1,
        metrics_path,
        final_checkpoint: if finished { final_ckpt } else { last_ckpt },
        beta,
    })
}

/// Outputs of `eval` / `report`.
#[derive(Debug)]
pub struct EvalSummary {
    pub perplexity: f64,
    pub activation_overall: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Evaluate a checkpoint on a corpus: perplexity plus telemetry files
/// (activation CSV/PGM always for MoE variants, diversity histogram for the
/// multi-head variant).
pub fn cmd_eval(checkpoint_path: &Path, corpus_path: &Path, out_dir: &Path) -> Result<EvalSummary> {
    let cp = checkpoint::load(checkpoint_path)?;
    let tokens = load_corpus(corpus_path)?;
    std::fs::create_dir_all(out_dir)?;
    let outcome = cp.model.evaluate(&tokens, cp.config.batch_size)?;
    println!("perplexity: {}", outcome.perplexity);

    let mut files = Vec::new();
    let mut activation_overall = None;
    if !outcome.logs.is_empty() {
        let matrix = activation_ratios(&outcome.logs, Normalization::PerEvent)?;
        let threshold = default_threshold(cp.model.config.n_experts);
        let (_, overall) = activation_percentage(&matrix, threshold)?;
        println!("activation: {:.2}% of experts above threshold {threshold}", overall * 100.0);
        activation_overall = Some(overall);
        let csv = out_dir.join("activation.csv");
        let pgm = out_dir.join("activation.pgm");
        write_activation_csv(&matrix, &csv)?;
        write_activation_pgm(&matrix, &pgm)?;
        files.push(csv);
        files.push(pgm);
        if cp.model.config.variant == Variant::Mhmoe {
            let path = out_dir.join("diversity.csv");
            write_diversity_csv(&outcome, &cp.model, &path)?;
            files.push(path);
        }
    }
    Ok(EvalSummary {
        perplexity: outcome.perplexity,
        activation_overall,
        files,
    })
}

/// Histogram of per-token assign diversity (averaged across layers, rounded
/// to the nearest integer bin). Rows sum to the token count.
fn write_diversity_csv(outcome: &EvalOutcome, model: &Model, path: &Path) -> Result<()> {
    let max_bin = model
        .config
        .n_experts
        .min(model.config.heads * model.config.k);
    let mut counts = vec![0u64; max_bin + 1]; // bins 1..=max_bin; index 0 unused
    let mut total = 0u64;
    for v in &outcome.diversity {
        let bin = v.round().max(1.0).min(max_bin as f64) as usize;
        counts[bin] += 1;
        total += 1;
    }
    let mut text = String::from("diversity,count\n");
    for (bin, c) in counts.iter().enumerate().skip(1) {
        let _ = writeln!(text, "{bin},{c}");
    }
    let _ = writeln!(text, "# tokens = {total}");
    std::fs::write(path, text)?;
    Ok(())
}

/// Telemetry-focused report over a checkpoint + corpus with configurable
/// threshold and normalization.
pub fn cmd_report(
    checkpoint_path: &Path,
    corpus_path: &Path,
    out_dir: &Path,
    threshold: Option<f64>,
    per_token: bool,
) -> Result<EvalSummary> {
    let cp = checkpoint::load(checkpoint_path)?;
    let tokens = load_corpus(corpus_path)?;
    std::fs::create_dir_all(out_dir)?;
    let outcome = cp.model.evaluate(&tokens, cp.config.batch_size)?;
    if outcome.logs.is_empty() {
        println!("no routed layers in this checkpoint; nothing to report");
        return Ok(EvalSummary {
            perplexity: outcome.perplexity,
            activation_overall: None,
            files: Vec::new(),
        });
    }
    let normalization = if per_token {
        Normalization::PerToken
    } else {
        Normalization::PerEvent
    };
    let matrix = activation_ratios(&outcome.logs, normalization)?;
    let threshold = threshold.unwrap_or_else(|| default_threshold(cp.model.config.n_experts));
    let (per_layer, overall) = activation_percentage(&matrix, threshold)?;
    println!(
        "activation threshold {threshold} ({} normalization)",
        if per_token { "per-token" } else { "per-event" }
    );
    for (layer, pct) in matrix.layers.iter().zip(&per_layer) {
        println!("layer {layer}: {:.2}% experts active", pct * 100.0);
    }
    println!("overall: {:.2}%", overall * 100.0);

    let csv = out_dir.join("activation.csv");
    let pgm = out_dir.join("activation.pgm");
    write_activation_csv(&matrix, &csv)?;
    write_activation_pgm(&matrix, &pgm)?;
    let mut files = vec![csv, pgm];
    if cp.model.config.variant == Variant::Mhmoe {
        let path = out_dir.join("diversity.csv");
        write_diversity_csv(&outcome, &cp.model, &path)?;
        files.push(path);
    }
    Ok(EvalSummary {
        perplexity: outcome.perplexity,
        activation_overall: Some(overall),
        files,
    })
}

/// Analytic + measured budget report for one config, JSON and a text table.
pub fn cmd_budget(config: &RunConfig, reference_table: bool, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let (shape, records) = param_manifest(&config.model)?;
    let report = budget::verify_params(&shape, &records)?;
    let flops = budget::flops_per_token(shape.d, shape.n_experts, shape.heads, shape.beta)?;

    let mut text = String::new();
    let _ = writeln!(text, "variant          : {}", config.model.variant.as_str());
    let _ = writeln!(text, "d / experts / h  : {} / {} / {}", shape.d, shape.n_experts, shape.heads);
    let _ = writeln!(text, "moe layers       : {}", shape.moe_layers);
    let _ = writeln!(text, "beta (resolved)  : {}", shape.beta);
    let _ = writeln!(text, "total params     : {}", report.total_params);
    let _ = writeln!(text, "bucket             formula      measured   match");
    let _ = writeln!(
        text,
        "expert weights   {:>12} {:>12}   {}",
        report.formula_experts, report.measured_expert_weights, report.expert_match
    );
    let _ = writeln!(
        text,
        "router weights   {:>12} {:>12}   {}",
        report.formula_router,
        report.measured_router_weights,
        if report.router_in_scope {
            report.router_match.to_string()
        } else {
            "out of scope (reduced router)".to_string()
        }
    );
    let _ = writeln!(
        text,
        "head+merge       {:>12} {:>12}   {}",
        report.formula_head_merge, report.measured_head_merge_weights, report.head_merge_match
    );
    let _ = writeln!(text, "bias params (outside formulas): {}", report.bias_params);
    let _ = writeln!(text, "theta baseline   : {}", flops.theta_smoe);
    let _ = writeln!(text, "theta multi-head : {}", flops.theta_mhmoe);
    let _ = writeln!(text, "delta            : {}", flops.delta);
    let _ = writeln!(text, "epsilon          : {}", flops.epsilon);
    for w in &flops.warnings {
        let _ = writeln!(text, "warning          : {w}");
    }

    let json = serde_json::json!({
        "variant": config.model.variant.as_str(),
        "d": shape.d,
        "n_experts": shape.n_experts,
        "heads": shape.heads,
        "beta": shape.beta,
        "moe_layers": shape.moe_layers,
        "total_params": report.total_params,
        "buckets": {
            "experts": { "formula": report.formula_experts, "measured": report.measured_expert_weights, "match": report.expert_match },
            "router": { "formula": report.formula_router, "measured": report.measured_router_weights, "in_scope": report.router_in_scope, "match": report.router_match },
            "head_merge": { "formula": report.formula_head_merge, "measured": report.measured_head_merge_weights, "match": report.head_merge_match },
            "bias_params": report.bias_params,
        },
        "flops_per_token": {
            "theta_smoe": flops.theta_smoe,
            "theta_mhmoe": flops.theta_mhmoe,
            "delta": flops.delta,
            "epsilon": flops.epsilon,
            "warnings": flops.warnings,
        },
        "excluded": report.excluded.iter().map(|(n, c)| serde_json::json!({"name": n, "numel": c})).collect::<Vec<_>>(),
    });

    let text_path = out_dir.join("budget.txt");
    let json_path = out_dir.join("budget.json");
    std::fs::write(&text_path, &text)?;
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    print!("{text}");
    files.push(text_path);
    files.push(json_path);

    if reference_table {
        let (t, j) = reference_configurations()?;
        let text_path = out_dir.join("budget_reference.txt");
        let json_path = out_dir.join("budget_reference.json");
        std::fs::write(&text_path, &t)?;
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&j).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        print!("{t}");
        files.push(text_path);
        files.push(json_path);
    }
    Ok(files)
}

/// The six reference configurations (d = 768, 6 MoE layers, h = 4,
/// N = 8..256): baseline expert budgets and the parameter-matched multi-head
/// counterpart with its solved beta.
pub fn reference_configurations() -> Result<(String, serde_json::Value)> {
    let d = 768u64;
    let layers = 6u64;
    let h = 4u64;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:>8} {:>16} {:>16} {:>16} {:>16} {:>10} {:>12}",
        "experts", "base experts", "base total", "mh experts", "mh total", "beta", "head+merge"
    );
    let mut rows = Vec::new();
    for n in [8u64, 16, 32, 64, 128, 256] {
        let smoe = budget::smoe_params(d, n);
        let sol: BetaSolution = budget::solve_beta(d, n, h, smoe.total())?;
        let _ = writeln!(
            text,
            "{n:>8} {:>16} {:>16} {:>16} {:>16} {:>10.4} {:>12}",
            smoe.experts * layers,
            smoe.total() * layers,
            sol.params.experts * layers,
            sol.params.total() * layers,
            sol.beta,
            sol.params.head_merge * layers,
        );
        rows.push(serde_json::json!({
            "n_experts": n,
            "baseline_expert_params": smoe.experts * layers,
            "baseline_total_params": smoe.total() * layers,
            "mh_expert_params": sol.params.experts * layers,
            "mh_total_params": sol.params.total() * layers,
            "head_merge_params": sol.params.head_merge * layers,
            "beta": sol.beta,
        }));
    }
    Ok((text, serde_json::json!({ "d": d, "moe_layers": layers, "heads": h, "rows": rows })))
}
