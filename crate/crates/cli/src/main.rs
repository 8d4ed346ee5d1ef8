//! `classim`: run classroom simulations, direct estimates and baselines,
//! then evaluate, ensemble and summarize them.

mod args;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use classim_core::pipeline::{
    expand_sweep, read_json, run_dpce, run_ensemble, run_evaluate, run_knowledge_baseline, run_simulation,
    EvaluateOptions, EvaluationReport, Mode, PipelineError, REPORT_FILE,
};

use crate::args::{Cli, Command, Variant};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn fail(e: PipelineError) -> String {
    e.to_string()
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Simulate(a) => {
            let mut config = a.resolve()?;
            config.mode = Mode::Simulate;
            for run in expand_sweep(&config) {
                let out = run_simulation(&run).map_err(fail)?;
                println!(
                    "{}: {} responses ({} new), {} students, model {}{}",
                    out.out.display(),
                    out.responses.len(),
                    out.manifest.counts.records_new,
                    out.classroom.len(),
                    out.manifest.model,
                    if out.manifest.complete {
                        ""
                    } else {
                        " [incomplete; re-run to resume]"
                    }
                );
            }
        }
        Command::Dpce { run, variant, samples } => {
            let mut config = run.resolve()?;
            config.mode = match variant {
                Variant::Greedy => Mode::DpceGreedy,
                Variant::Averaged => Mode::DpceAveraged,
            };
            if samples.is_some() {
                config.dpce_samples = samples;
            }
            let out = run_dpce(&config).map_err(fail)?;
            println!(
                "{}: {} items estimated, {} unparseable",
                config.out.display(),
                out.rates.len(),
                out.unparsed.len()
            );
        }
        Command::Baseline(a) => {
            let mut config = a.resolve()?;
            config.mode = Mode::KnowledgeBaseline;
            let report = run_knowledge_baseline(&config).map_err(fail)?;
            println!(
                "{}: accuracy {:.3} over {} items",
                report.model, report.overall.accuracy, report.overall.n_items
            );
            for (grade, acc) in &report.per_grade {
                println!("  grade {grade}: {:.3} over {} items", acc.accuracy, acc.n_items);
            }
        }
        Command::Evaluate {
            run,
            corpus,
            out,
            auc_mode,
            subgroups,
        } => {
            let mut options = EvaluateOptions {
                auc_mode: auc_mode.into(),
                ..Default::default()
            };
            if !subgroups.is_empty() {
                options.subgroups = subgroups;
            }
            let out = out.unwrap_or_else(|| run.clone());
            let report = run_evaluate(&run, corpus.as_deref(), &options, &out).map_err(fail)?;
            print!("{}", report.render_text());
        }
        Command::Ensemble {
            inputs,
            weights,
            corpus,
            out,
        } => {
            let inputs: Vec<(String, PathBuf)> = inputs.into_iter().map(|(k, v)| (k, PathBuf::from(v))).collect();
            let weights = weights
                .into_iter()
                .map(|(k, v)| {
                    v.parse::<f64>()
                        .map(|w| (k.clone(), w))
                        .map_err(|_| format!("weight for {k} is not a number: {v}"))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            let report = run_ensemble(&inputs, &weights, corpus.as_deref(), &out).map_err(fail)?;
            println!(
                "ensemble of {} members over {} items",
                report.weights.len(),
                report.rates.len()
            );
            if let Some(c) = report.ensemble_vs_real.as_ref().and_then(|d| d.value()) {
                println!("  ensemble vs real: r = {:.3}, rho = {:.3}", c.pearson.r, c.spearman.r);
            }
            for (name, d) in &report.members_vs_real {
                if let Some(c) = d.value() {
                    println!("  {name} vs real: r = {:.3}, rho = {:.3}", c.pearson.r, c.spearman.r);
                }
            }
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join(REPORT_FILE) } else { path };
            print!("{}", load_report(&file)?.render_text());
        }
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<EvaluationReport, String> {
    if !path.exists() {
        return Err(format!("{} not found; run `classim evaluate` first", path.display()));
    }
    read_json(path).map_err(fail)
}
