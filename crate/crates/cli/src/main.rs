use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathtree::config::{Config, SEED_ENV};
use pathtree::dataio::{
    export_heatmap, parse_coords, parse_grouping, read_embeddings, synth_generate, write_dataset, Dataset, PROMPTS_FILE,
};
use pathtree::model::{AnyModel, AttentionVariant, LinearProbe, ModelConfig, PathTree, SlideClassifier};
use pathtree::numerics::{grad_check, GradCheckOptions, Tensor};
use pathtree::taxonomy::{parse_taxonomy, random_taxonomy, Taxonomy};
use pathtree::trainer::{evaluate_model, format_log, kfold_split, load_model, train, Checkpoint};
use pathtree::{Error, ErrorClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "pathtree", version, about = "Hierarchical slide classification over precomputed embeddings")]
struct Cli {
    /// Configuration override, e.g. train.epochs=20 (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective configuration before running.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    /// Seed; overrides the PATHTREE_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a taxonomy file and print its node counts and root-to-node paths.
    ValidateTree {
        /// Taxonomy JSON.
        #[arg(long)]
        taxonomy: PathBuf,
    },
    /// Write a synthetic dataset (manifest, slides, prompts).
    Synth {
        /// Taxonomy JSON.
        #[arg(long)]
        taxonomy: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold and write checkpoints and the epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric reports.
    Eval(EvalArgs),
    /// Write per-slide predictions.
    Predict(PredictArgs),
    /// Write attention scores of one slide for one node.
    Heatmap(HeatmapArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Variant::Both)]
        variant: Variant,
    },
    /// Write the stratified fold assignment of a dataset.
    Split {
        /// Dataset root containing manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        /// Taxonomy JSON.
        #[arg(long)]
        taxonomy: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Inputs {
    /// Dataset root containing manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Taxonomy JSON.
    #[arg(long)]
    taxonomy: PathBuf,
    /// Node prompt embeddings [default: <data>/prompts.pte].
    #[arg(long)]
    prompts: Option<PathBuf>,
}

impl Inputs {
    fn prompts_path(&self) -> PathBuf {
        self.prompts.clone().unwrap_or_else(|| self.data.join(PROMPTS_FILE))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Validation fold index.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Train the attention-pooling linear baseline instead.
    #[arg(long)]
    probe: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict to one validation fold; all slides otherwise.
    #[arg(long)]
    fold: Option<usize>,
    /// Leaf-to-group TSV for coarse-grained metrics.
    #[arg(long)]
    coarse: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Slide embedding file.
    #[arg(long)]
    slide: PathBuf,
    /// Taxonomy JSON.
    #[arg(long)]
    taxonomy: PathBuf,
    /// Node prompt embeddings.
    #[arg(long)]
    prompts: PathBuf,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Node whose score row is exported [default: predicted leaf].
    #[arg(long)]
    node: Option<usize>,
    /// Patch coordinates, one "x y" pair per line.
    #[arg(long)]
    coords: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Gated,
    Nystrom,
    Both,
}

fn read_text(path: &Path) -> pathtree::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> pathtree::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_taxonomy(path: &Path) -> pathtree::Result<Taxonomy> {
    parse_taxonomy(&read_text(path)?)
}

/// Builds `out` in a sibling staging directory and swaps it in when complete.
fn atomic_dir(out: &Path, fill: impl FnOnce(&Path) -> pathtree::Result<()>) -> pathtree::Result<()> {
    let io = |what: &str, p: &Path| {
        let p = p.display().to_string();
        let what = what.to_string();
        move |e| Error::io(format!("{what} {p}"), e)
    };
    let name = out.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    let staging = out.with_file_name(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io("removing", &staging))?;
    }
    fs::create_dir_all(&staging).map_err(io("creating", &staging))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(io("replacing", out))?;
    }
    fs::rename(&staging, out).map_err(io("finalizing", out))
}

fn path_table(t: &Taxonomy) -> pathtree::Result<String> {
    let mut s = format!(
        "nodes={} leaves={} internal={}\nid\tdepth\tleaf\tpath\n",
        t.node_count(),
        t.leaf_count(),
        t.internal_count()
    );
    for node in t.nodes() {
        let names: Vec<&str> = t
            .find_path(node.id)?
            .iter()
            .map(|&v| t.nodes()[v].name.as_str())
            .collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{}", node.id, t.depth(node.id)?, u8::from(node.is_leaf()), names.join("/"));
    }
    Ok(s)
}

fn load_split(inputs: &Inputs, t: &Taxonomy) -> pathtree::Result<(Dataset, Tensor)> {
    let prompts = read_embeddings(&inputs.prompts_path())?;
    let data = Dataset::load(&inputs.data, t.leaf_count(), Some(prompts.cols()))?;
    Ok((data, prompts))
}

fn run_train(cfg: &Config, args: &TrainArgs) -> pathtree::Result<String> {
    let t = load_taxonomy(&args.inputs.taxonomy)?;
    let (data, prompts) = load_split(&args.inputs, &t)?;
    let folds = kfold_split(&data.labels(), cfg.train.folds, cfg.seed)?;
    let fold = folds
        .get(args.fold)
        .ok_or_else(|| Error::Config(format!("fold {} out of range 0..{}", args.fold, folds.len())))?;
    let (train_bags, val_bags) = (data.select(&fold.train), data.select(&fold.val));
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut model = if args.probe {
        AnyModel::LinearProbe(LinearProbe::new(t, prompts.cols(), cfg.seed)?)
    } else {
        AnyModel::PathTree(PathTree::new(t, prompts, cfg.model, cfg.train.loss.tau_init, cfg.seed)?)
    };
    let out = train(&mut model, cfg.model, &train_bags, &val_bags, &cfg.train, resume.as_ref())?;
    atomic_dir(&args.out, |dir| {
        if let Some(best) = &out.best {
            best.save(&dir.join("best.ckpt"))?;
        }
        out.last.save(&dir.join("last.ckpt"))?;
        write_text(&dir.join("train_log.tsv"), &format_log(&out.log))?;
        write_text(&dir.join("config.json"), &cfg.to_json())
    })?;
    let mut s = format_log(&out.log);
    let _ = writeln!(s, "best_epoch={} best_val_wf1={:.6}", out.last.best_epoch, out.last.best_metric);
    Ok(s)
}

fn restore_model(taxonomy: &Path, prompts: &Path, checkpoint: &Path) -> pathtree::Result<AnyModel> {
    let t = load_taxonomy(taxonomy)?;
    let prompts = read_embeddings(prompts)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    load_model(&ckpt, &t, Some(&prompts))
}

fn run_eval(cfg: &Config, args: &EvalArgs) -> pathtree::Result<String> {
    let model = restore_model(&args.inputs.taxonomy, &args.inputs.prompts_path(), &args.checkpoint)?;
    let t = model.taxonomy();
    let data = Dataset::load(&args.inputs.data, t.leaf_count(), Some(model.dim()))?;
    let bags = match args.fold {
        Some(k) => {
            let folds = kfold_split(&data.labels(), cfg.train.folds, cfg.seed)?;
            let fold = folds
                .get(k)
                .ok_or_else(|| Error::Config(format!("fold {k} out of range 0..{}", folds.len())))?;
            data.select(&fold.val)
        }
        None => data.bags.clone(),
    };
    let grouping = args
        .coarse
        .as_deref()
        .map(|p| parse_grouping(&read_text(p)?, t))
        .transpose()?;
    let eval = evaluate_model(&model, &bags, grouping.as_deref())?;
    let kv = eval.report.to_kv();
    atomic_dir(&args.out, |dir| {
        write_text(&dir.join("metrics.txt"), &kv)?;
        write_text(&dir.join("metrics.json"), &eval.report.to_json())?;
        write_text(&dir.join("predictions.tsv"), &predictions_tsv(&model, &eval.predictions))
    })?;
    Ok(kv)
}

fn predictions_tsv(model: &AnyModel, preds: &[pathtree::trainer::PredictionReport]) -> String {
    let t = model.taxonomy();
    let mut s = String::from("slide_id\ttrue_class\tpred_class\tpred_leaf\tpred_name");
    for &leaf in t.leaves() {
        let _ = write!(s, "\tp_{}", t.nodes()[leaf].name);
    }
    s.push('\n');
    for p in preds {
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            p.slide_id, p.true_class, p.pred_class, p.pred_leaf, p.pred_leaf_name
        );
        for q in &p.probs {
            let _ = write!(s, "\t{q:.8e}");
        }
        s.push('\n');
    }
    s
}

fn run_predict(args: &PredictArgs) -> pathtree::Result<String> {
    let model = restore_model(&args.inputs.taxonomy, &args.inputs.prompts_path(), &args.checkpoint)?;
    let data = Dataset::load(&args.inputs.data, model.taxonomy().leaf_count(), Some(model.dim()))?;
    let eval = evaluate_model(&model, &data.bags, None)?;
    let tsv = predictions_tsv(&model, &eval.predictions);
    write_text(&args.out, &tsv)?;
    Ok(format!("wrote {} predictions to {}\n", eval.predictions.len(), args.out.display()))
}

fn run_heatmap(args: &HeatmapArgs) -> pathtree::Result<String> {
    let model = restore_model(&args.taxonomy, &args.prompts, &args.checkpoint)?;
    let patches = read_embeddings(&args.slide)?;
    let pred = model.predict(&patches)?;
    let t = model.taxonomy();
    let node = match args.node {
        Some(v) => {
            t.node(v)?;
            v
        }
        None => t.leaf_id(pred.pred_class)?,
    };
    // Models with a single pooling row share it across nodes.
    let row = if pred.attention.rows() == 1 { 0 } else { node };
    let coords = args
        .coords
        .as_deref()
        .map(|p| parse_coords(&read_text(p)?))
        .transpose()?;
    export_heatmap(pred.attention.row(row), coords.as_deref(), &args.out)?;
    Ok(format!(
        "node={} name={} patches={} pred_class={}\n",
        node,
        t.nodes()[node].name,
        patches.rows(),
        pred.pred_class
    ))
}

fn run_gradcheck(cfg: &Config, variant: Variant) -> pathtree::Result<String> {
    let variants: &[AttentionVariant] = match variant {
        Variant::Gated => &[AttentionVariant::Gated],
        Variant::Nystrom => &[AttentionVariant::Nystrom],
        Variant::Both => &[AttentionVariant::Gated, AttentionVariant::Nystrom],
    };
    let (leaves, d, m) = (3, 8, 5);
    let t = random_taxonomy(leaves, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut random = |rows, cols| Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let x_t = random(t.node_count(), d);
    let x = random(m, d);
    let class = cfg.seed as usize % leaves;
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for &v in variants {
        let model_cfg = ModelConfig { attention: v, ..cfg.model };
        let mut model = PathTree::new(t.clone(), x_t.clone(), model_cfg, cfg.train.loss.tau_init, cfg.seed)?;
        model.compute_gradients(&x, class, &cfg.train.loss)?;
        let grads = model.store().grads();
        let report = grad_check(
            model.store(),
            &grads,
            |s| Ok(model.loss_with(s, &x, class, &cfg.train.loss)?.total),
            &GradCheckOptions { seed: cfg.seed, ..Default::default() },
        )?;
        let name = serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_owned)).unwrap_or_default();
        for p in &report.params {
            let _ = writeln!(out, "{name}\t{}\t{:.3e}", p.name, p.max_rel_error);
        }
        worst = worst.max(report.max_rel_error);
    }
    let _ = writeln!(out, "max_rel_error={worst:.6e}");
    if !(worst < GRADCHECK_TOL) {
        print!("{out}");
        return Err(Error::GradCheckFailed(format!("max relative error {worst:.3e} >= {GRADCHECK_TOL:e}")));
    }
    Ok(out)
}

fn run_split(cfg: &Config, data: &Path, taxonomy: &Path, out: &Path) -> pathtree::Result<String> {
    let t = load_taxonomy(taxonomy)?;
    let ds = Dataset::load(data, t.leaf_count(), None)?;
    let folds = kfold_split(&ds.labels(), cfg.train.folds, cfg.seed)?;
    let mut fold_of = vec![0; ds.bags.len()];
    for (k, f) in folds.iter().enumerate() {
        for &i in &f.val {
            fold_of[i] = k;
        }
    }
    let mut s = String::from("# slide_id\tclass\tfold\n");
    for (b, k) in ds.bags.iter().zip(fold_of) {
        let _ = writeln!(s, "{}\t{}\t{k}", b.slide_id, b.class);
    }
    write_text(out, &s)?;
    Ok(format!("wrote {} folds over {} slides to {}\n", folds.len(), ds.bags.len(), out.display()))
}

fn run_synth(cfg: &Config, taxonomy: &Path, out: &Path) -> pathtree::Result<String> {
    let t = load_taxonomy(taxonomy)?;
    let mut synth = cfg.synth;
    synth.leaves = t.leaf_count();
    let data = synth_generate(&synth, &t)?;
    atomic_dir(out, |dir| write_dataset(dir, &data))?;
    Ok(format!("wrote {} slides to {}\n", data.slides.len(), out.display()))
}

fn configure_threads(threads: usize) -> pathtree::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            return Err(Error::Config("built without the parallel feature".into()));
        }
        Ok(())
    }
}

fn run(cli: &Cli) -> pathtree::Result<String> {
    configure_threads(cli.threads)?;
    let env = std::env::var(SEED_ENV).ok();
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(cli.set.iter().cloned());
    let cfg = Config::resolve(env.as_deref(), &overrides)?;
    if cli.dump_config {
        print!("{}", cfg.to_kv());
    }
    match &cli.command {
        Command::ValidateTree { taxonomy } => path_table(&load_taxonomy(taxonomy)?),
        Command::Synth { taxonomy, out } => run_synth(&cfg, taxonomy, out),
        Command::Train(a) => run_train(&cfg, a),
        Command::Eval(a) => run_eval(&cfg, a),
        Command::Predict(a) => run_predict(a),
        Command::Heatmap(a) => run_heatmap(a),
        Command::Gradcheck { variant } => run_gradcheck(&cfg, *variant),
        Command::Split { data, taxonomy, out } => run_split(&cfg, data, taxonomy, out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match (e, e.class()) {
        (Error::Config(_), _) => 1,
        (_, ErrorClass::Data) => 2,
        (_, ErrorClass::Numeric) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("error: UsageError: {}", first.trim_start_matches("error: "));
            eprint!("{}", rendered.split_once('\n').map_or("", |(_, rest)| rest));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {detail}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
