//! `derprop`: rectify tensors, verify the theory numerically, check
//! gradients, and train or compare toy models.
//!
//! Exit codes: 0 success, 1 a verification or run failed, 2 usage or I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use derprop_core::gradsuite::run_gradient_suite;
use derprop_core::io::{read_tensor, write_tensor};
use derprop_core::similarity::{blend_pseudo_labels, derivative_propagate_with, BlendSchedule};
use derprop_core::theory::{
    boundedness_suite, counterexample_demo, verify_lemma1, verify_uniqueness, verify_well_posedness,
    UniquenessSearch, VerificationReport,
};
use derprop_core::{softmax_columns, DerivativeVariant, ProbMap};
use derprop_train::{ablation_study, generate_dataset, operator_study, train, Ablation, TrainConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "derprop", version, about = "Derivative label propagation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rectify logits through `S + Δ¹S` of the given features, optionally blending.
    Rectify(RectifyArgs),
    /// Numerically check the operator lemma and both theorems.
    Verify(VerifyArgs),
    /// Finite-difference check of every analytic loss gradient.
    Gradcheck(GradcheckArgs),
    /// Train the toy model from a JSON config into a run directory.
    Train(TrainArgs),
    /// Train once per derivative variant (or per ablation preset) and tabulate mIoU.
    CompareOps(CompareArgs),
    /// Print a worked example.
    Demo {
        #[arg(value_enum)]
        name: DemoName,
    },
}

#[derive(Args)]
struct RectifyArgs {
    /// Logits `[C, M]`.
    #[arg(long)]
    logits: PathBuf,
    /// Features `[D, M]`, normally L1-normalized per column.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend with `--prev` at epoch EP of TOTAL; the output is then a probability map.
    #[arg(long, num_args = 2, value_names = ["EP", "TOTAL"], requires = "prev")]
    blend: Option<Vec<usize>>,
    /// Unrectified probabilities `[C, M]` to blend with.
    #[arg(long, requires = "blend")]
    prev: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::Forward)]
    variant: VariantArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Forward,
    Central,
    Summation,
    SecondCentral,
}

impl From<VariantArg> for DerivativeVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Forward => DerivativeVariant::Forward,
            VariantArg::Central => DerivativeVariant::Central,
            VariantArg::Summation => DerivativeVariant::Summation,
            VariantArg::SecondCentral => DerivativeVariant::SecondCentral,
        }
    }
}

#[derive(Args)]
#[group(id = "which", multiple = false)]
struct Which {
    #[arg(long)]
    all: bool,
    #[arg(long)]
    lemma1: bool,
    #[arg(long)]
    thm1: bool,
    #[arg(long)]
    thm2: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    which: Which,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative singular-value tolerance for rank decisions.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Pixels per random feature map in the boundedness check.
    #[arg(long, default_value_t = 16)]
    pixels: usize,
    /// Generic anchors in the D=3 uniqueness search.
    #[arg(long, default_value_t = 20)]
    anchors: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    /// Compare the ablation presets instead of the derivative variants.
    #[arg(long)]
    ablations: bool,
    /// Seeds per ablation preset, counting up from the config seed.
    #[arg(long, default_value_t = 1, requires = "ablations")]
    seeds: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoName {
    Counterexample,
}

/// A failure with its exit code and message.
struct Failure(u8, String);

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure(2, e.to_string())
}

type Outcome = Result<(String, bool), Failure>;

fn json_block(out: &mut String, value: &impl Serialize) -> Result<(), Failure> {
    out.push_str("--- json ---\n");
    out.push_str(&serde_json::to_string_pretty(value).map_err(usage)?);
    out.push('\n');
    Ok(())
}

fn rectify(a: &RectifyArgs) -> Outcome {
    let logits = read_tensor(&a.logits).map_err(usage)?;
    let features = read_tensor(&a.features).map_err(usage)?;
    let variant = a.variant.into();
    let rectified = derivative_propagate_with(&logits, &features, variant).map_err(usage)?;
    let (written, what) = match (&a.blend, &a.prev) {
        (Some(b), Some(prev)) => {
            let sched = BlendSchedule::new(b[0], b[1]).map_err(usage)?;
            let pw = ProbMap::new(read_tensor(prev).map_err(usage)?).map_err(usage)?;
            let blended = blend_pseudo_labels(&pw, &softmax_columns(&rectified), sched).map_err(usage)?;
            (blended.tensor().clone(), format!("blended probabilities (eta = {}/{})", b[0], b[1]))
        }
        _ => (rectified, "rectified logits".to_string()),
    };
    write_tensor(&a.out, &written).map_err(usage)?;
    Ok((format!("wrote {what} {:?} to {}\n", written.dims(), a.out.display()), true))
}

fn verify(a: &VerifyArgs) -> Outcome {
    let w = &a.which;
    let all = w.all || !(w.lemma1 || w.thm1 || w.thm2);
    let mut reports: Vec<VerificationReport> = Vec::new();
    if all || w.lemma1 {
        reports.push(verify_lemma1(a.trials, a.dim, a.seed));
    }
    if all || w.thm1 {
        reports.push(verify_well_posedness(a.dim, a.tol));
        let (r, _) = verify_uniqueness(3, a.anchors, a.seed, &UniquenessSearch::default()).map_err(usage)?;
        reports.push(r);
    }
    if all || w.thm2 {
        reports.extend(boundedness_suite(a.trials, a.dim, a.pixels, a.seed));
    }
    let mut out = String::new();
    for r in &reports {
        write!(out, "{r}").expect("string write");
    }
    let passed = reports.iter().all(|r| r.passed);
    writeln!(out, "{} of {} reports passed", reports.iter().filter(|r| r.passed).count(), reports.len()).expect("string write");
    json_block(&mut out, &reports)?;
    Ok((out, passed))
}

fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let results = run_gradient_suite(a.trials, a.seed).map_err(usage)?;
    let mut out = String::new();
    for r in &results {
        writeln!(
            out,
            "[{}] {:<32} {} instances ({} redrawn), max rel error {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.case,
            r.instances,
            r.redrawn,
            r.max_rel_error
        )
        .expect("string write");
    }
    json_block(&mut out, &results)?;
    Ok((out, results.iter().all(|r| r.passed)))
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let data = generate_dataset(&cfg).map_err(usage)?;
    let run = train(&cfg, &data, Some(&a.out)).map_err(|e| Failure(1, e.to_string()))?;
    let last = run.metrics.last().expect("at least one epoch");
    let out = format!(
        "trained {} epochs ({} labeled, {} unlabeled scenes): train mIoU {:.4}, val mIoU {:.4}\nrun directory: {}\n",
        last.epoch,
        run.labeled.len(),
        run.unlabeled.len(),
        last.miou_train,
        last.miou_val,
        a.out.display()
    );
    Ok((out, true))
}

fn compare(a: &CompareArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let mut out = String::new();
    if a.ablations {
        let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.seed + k).collect();
        let rows = ablation_study(&cfg, &Ablation::ALL, &seeds).map_err(|e| Failure(1, e.to_string()))?;
        writeln!(out, "{:<14} {:>9}  per seed", "preset", "mean mIoU").expect("string write");
        for r in &rows {
            let per: Vec<String> = r.final_val_miou.iter().map(|x| format!("{x:.4}")).collect();
            writeln!(out, "{:<14} {:>9.4}  {}", r.name, r.mean, per.join(" ")).expect("string write");
        }
        json_block(&mut out, &rows)?;
        return Ok((out, true));
    }
    #[derive(Serialize)]
    struct Row {
        variant: String,
        final_val_miou: Option<f64>,
        error: Option<String>,
    }
    let mut rows = Vec::new();
    writeln!(out, "{:<15} {:>9}", "variant", "val mIoU").expect("string write");
    for (variant, result) in operator_study(&cfg) {
        match result {
            Ok(m) => {
                writeln!(out, "{:<15} {:>9.4}", variant.to_string(), m).expect("string write");
                rows.push(Row { variant: variant.to_string(), final_val_miou: Some(m), error: None });
            }
            Err(e) => {
                writeln!(out, "{:<15} {:>9}  ({e})", variant.to_string(), "n/a").expect("string write");
                rows.push(Row { variant: variant.to_string(), final_val_miou: None, error: Some(e.to_string()) });
            }
        }
    }
    json_block(&mut out, &rows)?;
    Ok((out, true))
}

fn demo(name: DemoName) -> Outcome {
    match name {
        DemoName::Counterexample => {
            let r = counterexample_demo().map_err(usage)?;
            let mut out = r.to_string();
            json_block(&mut out, &r)?;
            let ok = r.order0_admits_both && !r.constant_anchor_disambiguated && r.generic_disambiguated;
            Ok((out, ok))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Rectify(a) => rectify(a),
        Command::Verify(a) => verify(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => run_train(a),
        Command::CompareOps(a) => compare(a),
        Command::Demo { name } => demo(*name),
    };
    match outcome {
        Ok((text, passed)) => {
            print!("{text}");
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
