use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use wavy_core::blocks::{save_model, ModelParams};
use wavy_core::diagnostics::{emit_csv, format_f64, write_summary, Summary};
use wavy_core::experiments::{blockcheck, energy_suite, gradcheck, oversmoothing, simulate, DynamicsConfig};
use wavy_core::train::{metrics_jsonl, train};

use crate::config::{ConfigError, ExperimentConfig, TrainSection};
use crate::Command;

pub enum Outcome {
    Pass,
    Fail(String),
}

fn invalid<T>(section: &str, r: wavy_core::Result<T>) -> Result<T> {
    r.map_err(|e| ConfigError(format!("{section}: {e}")).into())
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| ConfigError("output.dir: missing required field (or pass --out)".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn dynamics(cfg: &ExperimentConfig) -> Result<&DynamicsConfig> {
    let d = cfg
        .dynamics
        .as_ref()
        .ok_or_else(|| ConfigError("dynamics: section required for this command".into()))?;
    invalid("dynamics", d.validate())?;
    Ok(d)
}

fn train_section(cfg: &ExperimentConfig) -> Result<&TrainSection> {
    cfg.train
        .as_ref()
        .ok_or_else(|| ConfigError("train: section required for this command".into()).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn summary(dir: &Path, cfg: &ExperimentConfig, metrics: serde_json::Value, start: Instant) -> Result<()> {
    let s = Summary {
        config: serde_json::to_value(cfg)?,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(write_summary(&s, dir.join("summary.json"))?)
}

fn verdict(pass: bool, what: &str) -> Outcome {
    if pass {
        Outcome::Pass
    } else {
        Outcome::Fail(format!("{what} exceeded its tolerance"))
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    invalid("model", cfg.model.validate())?;
    let start = Instant::now();
    match cmd {
        Command::Simulate => {
            let d = dynamics(cfg)?;
            let dir = output_dir(cfg, out)?;
            let sim = simulate(d)?;
            emit_csv(&sim.trace, dir.join("trace.csv"))?;
            let last = sim.trace.records.last().expect("initial record");
            summary(
                &dir,
                cfg,
                json!({
                    "steps": d.steps,
                    "variant": d.variant,
                    "final_cos_sim": last.cos_sim,
                    "final_potential_energy": last.potential_energy,
                    "final_wave_energy": last.wave_energy,
                    "attention_asymmetry": sim.attention.asymmetry(),
                    "attention_stochastic_residual": sim.attention.stochastic_residual(),
                }),
                start,
            )?;
            Ok(Outcome::Pass)
        }
        Command::Oversmoothing => {
            let o = &cfg.oversmoothing;
            let dir = output_dir(cfg, out)?;
            let seq_len = o.seq_len.unwrap_or(cfg.model.max_len);
            let r = invalid(
                "oversmoothing",
                oversmoothing(&cfg.model, o.model_seed, o.inputs, seq_len, o.input_seed),
            )?;
            let mut layers = String::from("layer,mean,std\n");
            for l in &r.layers {
                layers += &format!("{},{},{}\n", l.layer, format_f64(l.mean), format_f64(l.std));
            }
            fs::write(dir.join("oversmoothing.csv"), layers)?;
            let mut rows = String::from("input,layer,cos_sim\n");
            for (i, row) in r.per_input.iter().enumerate() {
                for (l, v) in row.iter().enumerate() {
                    rows += &format!("{i},{l},{}\n", format_f64(*v));
                }
            }
            fs::write(dir.join("oversmoothing_inputs.csv"), rows)?;
            summary(&dir, cfg, json!({ "means": r.means() }), start)?;
            Ok(Outcome::Pass)
        }
        Command::Energy => {
            let d = dynamics(cfg)?;
            let dir = output_dir(cfg, out)?;
            let r = energy_suite(d)?;
            write_json(&dir.join("energy.json"), &r)?;
            Ok(verdict(r.pass, "energy suite"))
        }
        Command::Gradcheck => {
            let dir = output_dir(cfg, out)?;
            let r = gradcheck(&cfg.checks.gradcheck())?;
            write_json(&dir.join("gradcheck.json"), &r)?;
            Ok(verdict(r.pass, "gradient check"))
        }
        Command::Blockcheck => {
            let dir = output_dir(cfg, out)?;
            let s = cfg.checks.blockcheck();
            if s.taus.is_empty() {
                return Err(ConfigError("checks.taus: must not be empty".into()).into());
            }
            let r = blockcheck(&s)?;
            write_json(&dir.join("blockcheck.json"), &r)?;
            Ok(verdict(r.pass, "block identity"))
        }
        Command::Train => {
            let t = train_section(cfg)?;
            let task = t.task_spec(&cfg.model);
            invalid("train", task.validate())?;
            let tc = t.train_config();
            invalid("train", tc.validate())?;
            let dir = output_dir(cfg, out)?;
            let init = ModelParams::init(&cfg.model, t.seed)?;
            match train(&init, &task, &tc) {
                Ok(o) => {
                    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&o.log))?;
                    save_model(dir.join("model.wvtf"), &o.model)?;
                    let last = o.log.last();
                    summary(
                        &dir,
                        cfg,
                        json!({
                            "final_loss": last.map(|r| r.loss),
                            "final_accuracy": last.map(|r| r.accuracy),
                            "lambda_mean": o.model.lambda_mean(),
                        }),
                        start,
                    )?;
                    Ok(Outcome::Pass)
                }
                Err(f) => {
                    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&f.log))?;
                    save_model(dir.join("last_good.wvtf"), &f.last_good)?;
                    Err(anyhow::anyhow!("training aborted at step {}: {}", f.step, f.error))
                }
            }
        }
    }
}
