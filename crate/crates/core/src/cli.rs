//! The `advbench` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Every file a
//! command writes gets a `<file>.manifest.json` sidecar from which
//! `advbench replay` reruns the command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{self, CwConfig, FgsmConfig, SweepAttack};
use crate::data::{self, LabeledDataset, SplitSpec};
use crate::distill::{self, DistillConfig, StudentEvaluation};
use crate::error::{Error, Result};
use crate::metrics::{self, AttackKind, SweepRecord};
use crate::nn::{self, ModelSpec};
use crate::report::{self, RunManifest, Series};
use crate::train::{self, History, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "advbench", version, about = "Adversarial robustness workbench", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier and save a checkpoint.
    Train(TrainArgs),
    /// Attack the test split at one epsilon and write a one-row CSV.
    Attack(AttackArgs),
    /// Attack the test split across an epsilon grid.
    Sweep(SweepArgs),
    /// Teacher, distilled student and baseline student, compared under attack.
    Distill(DistillArgs),
    /// Plot sweep CSVs as one SVG.
    Report(ReportArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// `synthetic` or `idx:<images>,<labels>`.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Seeds data generation, splitting, initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    /// A reference model name (teacher-cnn, student-cnn, mlp) or a descriptor.
    #[arg(long, default_value = "student-cnn")]
    model: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct AttackParams {
    #[arg(long, value_parser = parse_attack, default_value = "fgsm")]
    #[serde(serialize_with = "ser_display")]
    attack: AttackKind,
    /// Softmax temperature of the FGSM loss.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Adam step size of the CW optimization.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Attack only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    params: AttackParams,
    /// For CW, an L-infinity cap on the perturbation; omit for uncapped CW.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    params: AttackParams,
    /// Comma list, `fgsm-grid` (0.01..0.10) or `distill-grid`.
    #[arg(long, value_parser = parse_epsilon_grid, default_value = "fgsm-grid")]
    epsilons: EpsilonGrid,
    #[arg(long)]
    out: PathBuf,
    /// Also plot the sweep.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DistillArgs {
    #[arg(long, default_value_t = 100.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Test images attacked with CW.
    #[arg(long, default_value_t = 200)]
    cw_items: usize,
    /// Outputs are `<prefix>-<name>.{advw,csv,svg}`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ReportArgs {
    /// Sweep CSVs; each becomes a curve named after its file stem.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    svg: PathBuf,
    /// `top1`, `top5` or `accuracy`.
    #[arg(long, value_parser = parse_series, default_value = "top1")]
    series: Series,
}

#[derive(Debug, Clone, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_attack(s: &str) -> std::result::Result<AttackKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_series(s: &str) -> std::result::Result<Series, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Expands `fgsm-grid` and `distill-grid`, otherwise parses a comma list.
pub fn parse_epsilons(s: &str) -> std::result::Result<Vec<f64>, String> {
    match s {
        "fgsm-grid" => Ok(attacks::fgsm_epsilon_grid()),
        "distill-grid" => Ok(attacks::distill_epsilon_grid()),
        list => list
            .split(',')
            .map(|t| {
                let e: f64 = t.trim().parse().map_err(|_| format!("`{t}` is not a number"))?;
                if (0.0..=1.0).contains(&e) {
                    Ok(e)
                } else {
                    Err(format!("epsilon {e} is outside [0, 1]"))
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
struct EpsilonGrid(Vec<f64>);

fn parse_epsilon_grid(s: &str) -> std::result::Result<EpsilonGrid, String> {
    parse_epsilons(s).map(EpsilonGrid)
}

fn ser_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

fn run(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, args),
        Command::Attack(a) => cmd_attack(&a, args),
        Command::Sweep(a) => cmd_sweep(&a, args),
        Command::Distill(a) => cmd_distill(&a, args),
        Command::Report(a) => cmd_report(&a, args),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn manifest<T: Serialize>(args: &[String], seed: u64, ds: Option<&LabeledDataset>, config: &T) -> RunManifest {
    let config = match serde_json::to_value(config).expect("arguments serialize") {
        serde_json::Value::Object(map) => map.into_iter().collect(),
        other => BTreeMap::from([("value".to_string(), other)]),
    };
    RunManifest {
        argv: args.to_vec(),
        seed,
        dataset_fingerprint: ds.map(LabeledDataset::fingerprint),
        config,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn save_manifest(m: &RunManifest, output: &Path) -> Result<()> {
    m.save(&report::manifest_path(output))
}

fn load_data(a: &DataArgs) -> Result<LabeledDataset> {
    if a.data == "synthetic" {
        return data::default_synthetic(a.seed);
    }
    let paths = a
        .data
        .strip_prefix("idx:")
        .and_then(|p| p.split_once(','))
        .ok_or_else(|| Error::Config(format!("--data must be `synthetic` or `idx:<images>,<labels>`, got `{}`", a.data)))?;
    data::load_idx(Path::new(paths.0), Path::new(paths.1))
}

/// Two thirds train, two fifteenths validation, the rest test.
pub fn desk_split(n: usize, seed: u64) -> SplitSpec {
    let train = n * 2 / 3;
    let val = n * 2 / 15;
    SplitSpec {
        train,
        val,
        test: n - train - val,
        seed,
    }
}

fn splits(ds: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let (tr, va, te) = data::split(ds, &desk_split(ds.len(), seed))?;
    match (tr, va, te) {
        (Some(tr), Some(va), Some(te)) => Ok((tr, va, te)),
        _ => Err(Error::Config(format!("dataset `{}` is too small to split", ds.name))),
    }
}

fn resolve_model(name: &str, ds: &LabeledDataset) -> Result<ModelSpec> {
    if nn::reference_specs(ds.item_shape(), ds.classes)?.contains_key(name) {
        nn::reference_spec(name, ds.item_shape(), ds.classes)
    } else {
        name.parse()
    }
}

fn cmd_train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let ds = load_data(&a.data)?;
    let (tr, va, te) = splits(&ds, a.data.seed)?;
    let spec = resolve_model(&a.model, &ds)?;
    let init = nn::init_params(&spec, a.data.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        temperature: a.temperature,
        seed: a.data.seed,
    };
    eprintln!("training {spec} ({} parameters) on {} images", init.param_count(), tr.len());
    let (model, history) = train::train(&init, &tr, &va, &cfg)?;
    print_history(&history);
    println!(
        "train accuracy {:.4}  test accuracy {:.4}",
        metrics::accuracy(&model, &tr)?,
        metrics::accuracy(&model, &te)?
    );
    report::save_checkpoint(&model, &a.out)?;
    save_manifest(&manifest(args, a.data.seed, Some(&ds), a), &a.out)
}

fn print_history(h: &History) {
    for (e, ((t, v), lr)) in h.train_loss.iter().zip(&h.val_loss).zip(&h.lr).enumerate() {
        println!("epoch {:>3}  train loss {t:.6}  val loss {v:.6}  lr {lr:.1e}", e + 1);
    }
}

fn test_items(a: &DataArgs, limit: Option<usize>) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = load_data(a)?;
    let (_, _, te) = splits(&ds, a.seed)?;
    let te = match limit {
        Some(n) if n < te.len() => {
            let idx: Vec<usize> = (0..n).collect();
            te.subset(&idx, format!("{}[..{n}]", te.name))
                .ok_or(Error::Empty("--limit"))?
        }
        _ => te,
    };
    Ok((ds, te))
}

fn cw_config(p: &AttackParams, cap: Option<f64>) -> CwConfig {
    CwConfig {
        c: p.c,
        kappa: p.kappa,
        max_iterations: p.iters,
        step_size: p.step,
        epsilon_cap: cap,
        ..CwConfig::default()
    }
}

fn cmd_attack(a: &AttackArgs, args: &[String]) -> Result<()> {
    let model = report::load_checkpoint(&a.ckpt)?;
    let (ds, te) = test_items(&a.data, a.params.limit)?;
    let result = match a.params.attack {
        AttackKind::Fgsm => {
            let epsilon = a
                .epsilon
                .ok_or_else(|| Error::Config("FGSM needs --epsilon".into()))?;
            attacks::fgsm_attack(
                &model,
                &te.images,
                &te.labels,
                &FgsmConfig {
                    epsilon,
                    temperature: a.params.temperature,
                },
            )?
        }
        AttackKind::Cw => attacks::cw_attack(&model, &te.images, &te.labels, &cw_config(&a.params, a.epsilon))?,
    };
    let (top1_error, top5_error) = metrics::top1_top5(&model, &result.adversarial, &te.labels)?;
    let record = SweepRecord {
        epsilon: a.epsilon.unwrap_or(0.0),
        top1_error,
        top5_error,
        mean_l2: result.mean_l2(),
        success_rate: result.success_rate(),
        attack: a.params.attack,
    };
    print!("{}", report::format_csv(&[record])?);
    report::write_csv(&[record], &a.out)?;
    save_manifest(&manifest(args, a.data.seed, Some(&ds), a), &a.out)
}

fn cmd_sweep(a: &SweepArgs, args: &[String]) -> Result<()> {
    let model = report::load_checkpoint(&a.ckpt)?;
    let (ds, te) = test_items(&a.data, a.params.limit)?;
    let attack = match a.params.attack {
        AttackKind::Fgsm => SweepAttack::Fgsm {
            temperature: a.params.temperature,
        },
        AttackKind::Cw => SweepAttack::Cw(cw_config(&a.params, None)),
    };
    let records = attacks::epsilon_sweep(&model, &te, &attack, &a.epsilons.0)?;
    print!("{}", report::format_csv(&records)?);
    let m = manifest(args, a.data.seed, Some(&ds), a);
    report::write_csv(&records, &a.out)?;
    save_manifest(&m, &a.out)?;
    if let Some(svg) = &a.svg {
        let name = curve_name(&a.out);
        let curves = vec![
            (format!("{name} top-1"), records.clone()),
            (format!("{name} top-5"), records.clone()),
        ];
        report::write_atomic(svg, two_series_svg(&curves)?.as_bytes())?;
        save_manifest(&m, svg)?;
    }
    Ok(())
}

/// Top-1 and top-5 error of one sweep on shared axes.
fn two_series_svg(curves: &[(String, Vec<SweepRecord>)]) -> Result<String> {
    let mut as_top1 = curves.to_vec();
    for r in &mut as_top1[1].1 {
        r.top1_error = r.top5_error;
    }
    report::svg_document(&as_top1, Series::Top1Error)
}

fn curve_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn print_student(label: &str, s: &StudentEvaluation) {
    println!(
        "{label}: clean accuracy {:.4}, uncapped CW success {:.4} ({:.4} on correctly classified)",
        s.clean_accuracy, s.cw_success_rate, s.cw_success_rate_on_correct
    );
    for (f, c) in s.fgsm.iter().zip(&s.cw) {
        println!(
            "  eps {:.3}  FGSM accuracy {:.4}  capped-CW accuracy {:.4}",
            f.epsilon,
            f.top1_accuracy(),
            c.top1_accuracy()
        );
    }
}

fn history_csv(histories: &[(&str, &History)]) -> String {
    let mut out = String::from("model,epoch,train_loss,val_loss,lr\n");
    for (name, h) in histories {
        for e in 0..h.train_loss.len() {
            out.push_str(&format!(
                "{name},{},{:.6},{:.6},{:e}\n",
                e + 1,
                h.train_loss[e],
                h.val_loss[e],
                h.lr[e]
            ));
        }
    }
    out
}

fn cmd_distill(a: &DistillArgs, args: &[String]) -> Result<()> {
    let ds = data::default_synthetic(a.seed)?;
    let mut cfg = DistillConfig::desk_default(ds.item_shape(), ds.classes, a.seed)?;
    cfg.temperature = a.temperature;
    cfg.lambda = a.lambda;
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch;
    cfg.cw_items = a.cw_items;
    let outcome = distill::distill_pipeline(&ds, &cfg)?;
    let r = &outcome.report;
    println!("teacher clean accuracy {:.4}", r.teacher_accuracy);
    print_student("baseline student", &r.baseline);
    print_student("distilled student", &r.distilled);

    let m = manifest(args, a.seed, Some(&ds), a);
    let mut outputs = Vec::new();
    for (name, model) in [
        ("teacher", &outcome.teacher),
        ("distilled", &outcome.distilled),
        ("baseline", &outcome.baseline),
    ] {
        let p = prefixed(&a.out_prefix, &format!("-{name}.advw"));
        report::save_checkpoint(model, &p)?;
        outputs.push(p);
    }
    let mut curves = Vec::new();
    for (name, eval) in [("baseline", &r.baseline), ("distilled", &r.distilled)] {
        for (attack, records) in [("fgsm", &eval.fgsm), ("cw", &eval.cw)] {
            let p = prefixed(&a.out_prefix, &format!("-{name}-{attack}.csv"));
            report::write_csv(records, &p)?;
            outputs.push(p);
            curves.push((format!("{name} {attack}"), records.clone()));
        }
    }
    let svg = prefixed(&a.out_prefix, "-accuracy.svg");
    report::render_svg(&curves, Series::Top1Accuracy, &svg)?;
    outputs.push(svg);
    let hist = prefixed(&a.out_prefix, "-history.csv");
    report::write_atomic(
        &hist,
        history_csv(&[
            ("teacher", &outcome.teacher_history),
            ("distilled", &outcome.distilled_history),
            ("baseline", &outcome.baseline_history),
        ])
        .as_bytes(),
    )?;
    outputs.push(hist);
    for p in &outputs {
        save_manifest(&m, p)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, args: &[String]) -> Result<()> {
    let curves = a
        .inputs
        .iter()
        .map(|p| Ok((curve_name(p), report::read_csv(p)?)))
        .collect::<Result<Vec<_>>>()?;
    report::render_svg(&curves, a.series, &a.svg)?;
    save_manifest(&manifest(args, 0, None, a), &a.svg)
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    if m.argv.first().map(String::as_str) == Some("replay") {
        return Err(Error::Config("a manifest cannot record a replay".into()));
    }
    if m.tool_version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "warning: manifest was written by version {}, this is {}",
            m.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let argv = std::iter::once("advbench".to_string()).chain(m.argv.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(format!("manifest arguments: {e}")))?;
    run(cli.command, &m.argv)
}
