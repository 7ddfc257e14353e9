//! `kfree` command-line runner.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfree::baselines::label_propagation;
use kfree::graph::{generate_planted_graph, load_graph, parse_labels, save_graph, PlantedSpec};
use kfree::metrics::PartitionScores;
use kfree::training::{fit, format_history, format_partition, parse_partition, TrainConfig};
use kfree::AttributedGraph;
use log::info;

use config::Settings;

type CliResult<T> = Result<T, String>;

#[derive(Parser, Debug)]
#[command(
    name = "kfree",
    version,
    about = "K-free community detection on attributed graphs"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-partition graph with cluster-correlated attributes.
    Generate(GenerateArgs),
    /// Fit the model and write the best checkpoint, partition and report.
    Train(TrainArgs),
    /// Score a stored partition.
    Eval(EvalArgs),
    /// Run the label-propagation baseline.
    Lpa(LpaArgs),
}

#[derive(Args, Debug, Default)]
struct GenerateArgs {
    /// Flat key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    attr_dim: Option<usize>,
    /// Distance between cluster attribute means.
    #[arg(long)]
    sep: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Ground truth; enables nmi and edge in the report.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds fitted concurrently into `<out>/seed-<s>/`.
    #[arg(long, conflicts_with = "seed")]
    seeds: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    readout_hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Disable attribute masking (reconstruct every node).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_mask: Option<bool>,
    /// Average the ranking loss over triplets instead of summing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bpr_mean: Option<bool>,
    /// L1-normalize attribute rows before training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    row_normalize: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Partition to score: `node community` lines or one label per line.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Reference labels, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Reference given as a partition file, e.g. another method's output.
    #[arg(long, conflicts_with = "labels")]
    truth: Option<PathBuf>,
    /// Directory for report.txt; the report is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct LpaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    attrs: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

/// Fills every `None` field from the config file, then rejects leftovers.
macro_rules! merge_config {
    ($args:expr, $($field:ident),* $(,)?) => {{
        let args = &mut $args;
        if let Some(path) = &args.config {
            let mut settings: Settings = config::load(path)?;
            $(
                let v = config::take(&mut settings, stringify!($field))?;
                if args.$field.is_none() {
                    args.$field = v;
                }
            )*
            config::reject_unknown(&settings)?;
        }
    }};
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| format!("missing required setting {key}"))
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| format!("cannot create {}: {e}", path.display()))
}

fn load(
    edges: &Option<PathBuf>,
    attrs: &Option<PathBuf>,
    labels: Option<&Path>,
) -> CliResult<AttributedGraph> {
    let edges = required(edges, "edges")?;
    let attrs = required(attrs, "attrs")?;
    load_graph(edges, attrs, labels).map_err(|e| e.to_string())
}

fn cmd_generate(mut args: GenerateArgs) -> CliResult<()> {
    merge_config!(args, out, n, k, p_in, p_out, attr_dim, sep, seed);
    let spec = PlantedSpec {
        n_nodes: *required(&args.n, "n")?,
        k_true: *required(&args.k, "k")?,
        p_in: *required(&args.p_in, "p_in")?,
        p_out: *required(&args.p_out, "p_out")?,
        attr_dim: *required(&args.attr_dim, "attr_dim")?,
        attr_separation: *required(&args.sep, "sep")?,
        seed: args.seed.unwrap_or(0),
    };
    spec.validate().map_err(|e| e.to_string())?;
    let out = required(&args.out, "out")?;
    let g = generate_planted_graph(&spec).map_err(|e| e.to_string())?;
    create_dir(out)?;
    save_graph(
        &g,
        &out.join("edges.txt"),
        &out.join("attrs.txt"),
        Some(&out.join("labels.txt")),
    )
    .map_err(|e| e.to_string())?;
    let echo = config::render(&[
        ("out", display_path(out)),
        ("n", spec.n_nodes.to_string()),
        ("k", spec.k_true.to_string()),
        ("p_in", spec.p_in.to_string()),
        ("p_out", spec.p_out.to_string()),
        ("attr_dim", spec.attr_dim.to_string()),
        ("sep", spec.attr_separation.to_string()),
        ("seed", spec.seed.to_string()),
    ]);
    write(&out.join("config.txt"), &echo)?;
    print!("{echo}");
    println!("edges={}", g.n_edges());
    Ok(())
}

struct TrainPlan {
    edges: PathBuf,
    attrs: PathBuf,
    labels: Option<PathBuf>,
    out: PathBuf,
    seeds: Vec<u64>,
    multi: bool,
    row_normalize: bool,
    base: TrainConfig,
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| format!("bad seed {t:?} in --seeds"))
        })
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err("--seeds is empty".into());
    }
    Ok(seeds)
}

fn resolve_train(mut args: TrainArgs) -> CliResult<TrainPlan> {
    merge_config!(
        args,
        edges,
        attrs,
        labels,
        out,
        seed,
        seeds,
        alpha,
        beta,
        k_max,
        mask_fraction,
        max_epochs,
        eval_every,
        lr,
        weight_decay,
        hidden,
        heads,
        readout_hidden,
        dropout,
        no_mask,
        bpr_mean,
        row_normalize,
    );
    let d = TrainConfig::default();
    let base = TrainConfig {
        mask_fraction: args.mask_fraction.unwrap_or(d.mask_fraction),
        max_epochs: args.max_epochs.unwrap_or(d.max_epochs),
        eval_every: args.eval_every.unwrap_or(d.eval_every),
        lr: args.lr.unwrap_or(d.lr),
        weight_decay: args.weight_decay.unwrap_or(d.weight_decay),
        alpha: args.alpha.unwrap_or(d.alpha),
        beta: args.beta.unwrap_or(d.beta),
        k_max: args.k_max.unwrap_or(d.k_max),
        hidden: args.hidden.unwrap_or(d.hidden),
        heads: args.heads.unwrap_or(d.heads),
        readout_hidden: args.readout_hidden.unwrap_or(d.readout_hidden),
        dropout: args.dropout.unwrap_or(d.dropout),
        seed: args.seed.unwrap_or(d.seed),
        masking: !args.no_mask.unwrap_or(false),
        bpr_mean: args.bpr_mean.unwrap_or(d.bpr_mean),
    };
    base.validate().map_err(|e| e.to_string())?;
    base.model_config(1).validate().map_err(|e| e.to_string())?;
    let (seeds, multi) = match (&args.seeds, args.seed) {
        (Some(_), Some(_)) => return Err("seed and seeds are mutually exclusive".into()),
        (Some(list), None) => (parse_seeds(list)?, true),
        (None, _) => (vec![base.seed], false),
    };
    Ok(TrainPlan {
        edges: required(&args.edges, "edges")?.clone(),
        attrs: required(&args.attrs, "attrs")?.clone(),
        labels: args.labels.clone(),
        out: required(&args.out, "out")?.clone(),
        seeds,
        multi,
        row_normalize: args.row_normalize.unwrap_or(false),
        base,
    })
}

fn train_echo(plan: &TrainPlan, c: &TrainConfig, out: &Path) -> String {
    let mut entries = vec![
        ("edges", display_path(&plan.edges)),
        ("attrs", display_path(&plan.attrs)),
    ];
    if let Some(l) = &plan.labels {
        entries.push(("labels", display_path(l)));
    }
    entries.extend([
        ("out", display_path(out)),
        ("seed", c.seed.to_string()),
        ("alpha", c.alpha.to_string()),
        ("beta", c.beta.to_string()),
        ("k_max", c.k_max.to_string()),
        ("mask_fraction", c.mask_fraction.to_string()),
        ("max_epochs", c.max_epochs.to_string()),
        ("eval_every", c.eval_every.to_string()),
        ("lr", c.lr.to_string()),
        ("weight_decay", c.weight_decay.to_string()),
        ("hidden", c.hidden.to_string()),
        ("heads", c.heads.to_string()),
        ("readout_hidden", c.readout_hidden.to_string()),
        ("dropout", c.dropout.to_string()),
        ("no_mask", (!c.masking).to_string()),
        ("bpr_mean", c.bpr_mean.to_string()),
        ("row_normalize", plan.row_normalize.to_string()),
    ]);
    config::render(&entries)
}

fn train_one(plan: &TrainPlan, g: &AttributedGraph, seed: u64, out: &Path) -> CliResult<String> {
    let cfg = TrainConfig {
        seed,
        ..plan.base.clone()
    };
    create_dir(out)?;
    write(&out.join("config.txt"), train_echo(plan, &cfg, out))?;
    let result = fit(g, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
    let best = &result.best;
    let scores =
        PartitionScores::compute(g, &best.partition, g.labels()).map_err(|e| e.to_string())?;
    let lpa = label_propagation(g, seed, 100).map_err(|e| e.to_string())?;
    let lpa_scores =
        PartitionScores::compute(g, &lpa.labels, g.labels()).map_err(|e| e.to_string())?;

    let mut report = format!("seed={seed}\nbest_epoch={}\n", best.epoch);
    if let Some(p) = best.selection_score() {
        report.push_str(&format!("selection_score={p}\n"));
    }
    report.push_str(&scores.to_string());
    for line in lpa_scores.to_string().lines() {
        report.push_str(&format!("lpa_{line}\n"));
    }

    write(
        &out.join("partition.txt"),
        format_partition(&best.partition),
    )?;
    write(&out.join("history.tsv"), format_history(&result.history))?;
    write(&out.join("model.ckpt"), &best.parameters)?;
    write(&out.join("report.txt"), &report)?;
    info!("seed {seed}: K={} at epoch {}", scores.k, best.epoch);
    Ok(report)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let plan = resolve_train(args)?;
    let mut g = load(
        &Some(plan.edges.clone()),
        &Some(plan.attrs.clone()),
        plan.labels.as_deref(),
    )?;
    if plan.row_normalize {
        g.row_normalize_attributes();
    }
    create_dir(&plan.out)?;
    if !plan.multi {
        let report = train_one(&plan, &g, plan.seeds[0], &plan.out)?;
        print!("{report}");
        return Ok(());
    }
    let reports: Vec<CliResult<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .seeds
            .iter()
            .map(|&seed| {
                let (plan, g) = (&plan, &g);
                s.spawn(move || train_one(plan, g, seed, &plan.out.join(format!("seed-{seed}"))))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err("fit thread panicked".into()))
            })
            .collect()
    });
    for r in reports {
        print!("{}", r?);
    }
    Ok(())
}

fn cmd_eval(mut args: EvalArgs) -> CliResult<()> {
    merge_config!(args, edges, attrs, partition, labels, truth, out);
    if args.labels.is_some() && args.truth.is_some() {
        return Err("labels and truth are mutually exclusive".into());
    }
    let g = load(&args.edges, &args.attrs, None)?;
    let read = |p: &Path| parse_partition(p).map_err(|e| e.to_string());
    let pred = read(required(&args.partition, "partition")?)?;
    let truth = match (&args.labels, &args.truth) {
        (Some(l), _) => Some(parse_labels(l).map_err(|e| e.to_string())?),
        (None, Some(t)) => Some(read(t)?),
        (None, None) => None,
    };
    for (what, len) in [
        ("partition", Some(pred.len())),
        ("truth", truth.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != g.n_nodes() {
                return Err(format!(
                    "{what} has {len} entries, graph has {} nodes",
                    g.n_nodes()
                ));
            }
        }
    }
    let scores =
        PartitionScores::compute(&g, &pred, truth.as_deref()).map_err(|e| e.to_string())?;
    let report = scores.to_string();
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("report.txt"), &report)?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_lpa(mut args: LpaArgs) -> CliResult<()> {
    merge_config!(args, edges, attrs, labels, out, seed, max_iter);
    let g = load(&args.edges, &args.attrs, args.labels.as_deref())?;
    let seed = args.seed.unwrap_or(0);
    let r = label_propagation(&g, seed, args.max_iter.unwrap_or(100)).map_err(|e| e.to_string())?;
    let scores = PartitionScores::compute(&g, &r.labels, g.labels()).map_err(|e| e.to_string())?;
    let report = format!(
        "seed={seed}\niterations={}\nconverged={}\n{scores}",
        r.iterations, r.converged
    );
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("partition.txt"), format_partition(&r.labels))?;
        write(&out.join("report.txt"), &report)?;
    }
    print!("{report}");
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Lpa(a) => cmd_lpa(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::FAILURE
        }
    }
}
