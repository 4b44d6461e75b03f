mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use persrec::costmodel::{cost_report, Calibration, CostParams, CostReport};
use persrec::datakit::{
    decode_item, generate_synthetic_labeled, ingest_tsv, write_item_map, write_tsv, SyntheticConfig,
};
use persrec::evalkit::{
    decay_eval, evaluate, placement_compare, plan_input, placement_plan, write_decay_csv, write_metrics_csv,
    write_placement_csv, DecayUser, MetricsRow,
};
use persrec::expertlens::attribute_experts;
use persrec::inference::{autoregress, compress_segments, read_cache, write_cache, ExpertCache};
use persrec::maskgen::segmented_mask;
use persrec::seqcore::{build_plan, Dataset, SegmentationPlan};
use persrec::tinyformer::{init_model, read_checkpoint, write_checkpoint, Model, ModelConfig};
use persrec::trainer::{train, TrainConfig};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "persrec", version, about = "Sequential recommendation with segment compression into expert tokens")]
struct Cli {
    /// Worker threads for per-user parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log (TSV).
    GenData(GenDataArgs),
    /// Train a model and write a PSR1 checkpoint plus per-epoch stats.
    Train(TrainCmd),
    /// Next-item Recall/NDCG on the first held-out event of every user.
    Eval(EvalCmd),
    /// Rank items for one history, optionally through a stored expert cache.
    Infer(InferCmd),
    /// Print the segmented attention mask of a plan as rows of 0/1.
    Mask(MaskCmd),
    /// Closed-form compute costs and ratios.
    Cost(CostCmd),
    /// Slide the recent window over the test span with frozen caches.
    Decay(DecayCmd),
    /// Train and evaluate one model per expert placement setting.
    Placement(PlacementCmd),
    /// Non-negative attribution of each expert to the items it compresses.
    Attribute(AttributeCmd),
}

#[derive(Args, Serialize)]
struct PlanArgs {
    /// Comma-separated segment lengths, e.g. 64,16.
    #[arg(long, value_delimiter = ',', required_unless_present = "plan_file")]
    segments: Option<Vec<usize>>,
    /// Comma-separated expert counts per segment (default: all zero).
    #[arg(long, value_delimiter = ',')]
    experts: Option<Vec<usize>>,
    /// File with `segments = [..]; experts = [..]`.
    #[arg(long, conflicts_with_all = ["segments", "experts"])]
    plan_file: Option<PathBuf>,
}

impl PlanArgs {
    fn plan(&self) -> Result<SegmentationPlan> {
        if let Some(path) = &self.plan_file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(text.parse()?);
        }
        let segments = self.segments.clone().ok_or_else(|| anyhow!("--segments or --plan-file is required"))?;
        let experts = self.experts.clone().unwrap_or_else(|| vec![0; segments.len()]);
        Ok(build_plan(&segments, &experts)?)
    }
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Event log with header `user_id<TAB>item_id<TAB>event_type<TAB>timestamp`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_events: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_events: usize,
    /// Trailing events per user held out for evaluation.
    #[arg(long, default_value_t = 1)]
    test_len: usize,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    /// Defaults to the flattened plan length.
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long, default_value_t = 7)]
    model_seed: u32,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 16)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Shuffling seed.
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Train under a plain causal mask.
    #[arg(long)]
    causal_baseline: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch,
            epochs: self.epochs,
            grad_clip: (self.clip > 0.0).then_some(self.clip),
            seed: self.seed,
            causal_baseline: self.causal_baseline,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 2048)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 100)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.7)]
    p_long: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_floor: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional `user_id<TAB>cluster` file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Stats CSV (default `<out>.stats.csv`).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
    ks: Vec<usize>,
    /// Label written in the method column.
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct InferCmd {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Items of the compressed segments (dense ids); builds a fresh cache.
    #[arg(long, value_delimiter = ',', conflicts_with = "cache")]
    prefix: Option<Vec<u32>>,
    /// Read a PSC1 cache instead of building one.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Write the cache that was used.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    /// Recent items (dense ids), oldest first.
    #[arg(long, value_delimiter = ',', required = true)]
    recent: Vec<u32>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Greedy generation steps.
    #[arg(long, default_value_t = 1)]
    steps: usize,
}

#[derive(Args, Serialize)]
struct MaskCmd {
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args, Serialize)]
struct CostCmd {
    #[arg(long = "L", default_value_t = 16)]
    layers: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// FFN width; adds costs calibrated to the instrumented kernels.
    #[arg(long)]
    ffn: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DecayCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Recent window (default: last segment length).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 64)]
    stride: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
    ks: Vec<usize>,
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long, default_value = "decay.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PlacementCmd {
    #[command(flatten)]
    data: DataArgs,
    /// One setting per line: expert counts such as `[1,1,2]`, or a full plan.
    #[arg(long)]
    settings: PathBuf,
    #[arg(long)]
    pretrain_len: usize,
    #[arg(long)]
    recent_len: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
    ks: Vec<usize>,
    #[arg(long, default_value = "placement.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AttributeCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// User id as it appears in the data file.
    #[arg(long)]
    user: u64,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// TSV output (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Per-user training histories and held-out events.
struct Histories {
    dataset: Dataset,
    user_ids: Vec<u64>,
    train: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
}

impl Histories {
    fn load(args: &DataArgs) -> Result<Self> {
        let dataset = ingest_tsv(&args.data, args.min_events, args.max_events)?;
        let mut h = Histories {
            user_ids: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
            dataset,
        };
        for u in &h.dataset.users {
            if u.events.len() <= args.test_len {
                continue;
            }
            let ids = u.item_ids();
            let cut = ids.len() - args.test_len;
            h.user_ids.push(u.user_id);
            h.train.push(ids[..cut].to_vec());
            h.test.push(ids[cut..].to_vec());
        }
        if h.train.is_empty() {
            bail!("EmptyEvalSet: no user has more than {} events", args.test_len);
        }
        Ok(h)
    }

    fn targets(&self) -> Vec<u32> {
        self.test.iter().map(|t| t[0]).collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_model(path: &Path) -> Result<(Model, u32)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_checkpoint(BufReader::new(file))?)
}

fn model_config(args: &ModelArgs, vocab: usize, plan: &SegmentationPlan) -> ModelConfig {
    ModelConfig {
        num_layers: args.layers,
        model_dim: args.dim,
        num_heads: args.heads,
        ffn_dim: args.ffn,
        vocab_size: vocab,
        max_positions: args.max_positions.unwrap_or(plan.flat_len()),
        num_expert_slots: plan.total_experts(),
        seed: args.model_seed,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_users: args.users,
        vocab_size: args.vocab,
        num_clusters: args.clusters,
        seq_len: args.seq_len,
        p_long: args.p_long,
        noise_floor: args.noise_floor,
        zipf_exponent: args.zipf,
        drift_rate: args.drift,
        seed: args.seed,
    };
    let (ds, clusters) = generate_synthetic_labeled(&cfg)?;
    let mut out = create(&args.out)?;
    write_tsv(&ds, &mut out)?;
    out.flush()?;
    let mut manifest = RunManifest::new("gen-data", args)?.seed("data", args.seed).output(&args.out);
    if let Some(path) = &args.labels {
        let mut w = create(path)?;
        writeln!(w, "user_id\tcluster")?;
        for (u, c) in ds.users.iter().zip(&clusters) {
            writeln!(w, "{}\t{}", u.user_id, c)?;
        }
        w.flush()?;
        manifest = manifest.output(path);
    }
    manifest.write_for(&args.out)?;
    eprintln!("wrote {} events for {} users to {}", ds.num_events(), ds.users.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    let h = Histories::load(&args.data)?;
    let cfg = model_config(&args.model, h.dataset.vocab_size, &plan);
    let model = init_model(&cfg)?;
    let (model, stats) = train(model, &h.train, &plan, &args.train.config())?;
    let mut out = create(&args.out)?;
    let crc = write_checkpoint(&model, &mut out)?;
    out.flush()?;
    let stats_path = args.stats.clone().unwrap_or_else(|| with_suffix(&args.out, ".stats.csv"));
    std::fs::write(&stats_path, stats.to_csv())?;
    let map_path = args.out.with_file_name("item_map.tsv");
    let mut manifest = RunManifest::new("train", args)?
        .seed("model", u64::from(args.model.model_seed))
        .seed("shuffle", args.train.seed)
        .input(&args.data.data)
        .output(&args.out)
        .output(&stats_path)
        .checkpoint(&args.out, crc);
    if let Some(map) = &h.dataset.item_map {
        let mut w = create(&map_path)?;
        write_item_map(map, &mut w)?;
        w.flush()?;
        manifest = manifest.output(&map_path);
    }
    manifest.write_for(&args.out)?;
    eprintln!(
        "trained {} epochs on {} users, final loss {:.4}, checkpoint crc {crc:08x}",
        stats.epochs.len(),
        h.train.len(),
        stats.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_cmd(args: &EvalCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    let h = Histories::load(&args.data)?;
    let (model, crc) = load_model(&args.checkpoint)?;
    let metrics = evaluate(&model, &h.train, &h.targets(), &plan, &args.ks)?;
    let rows = vec![MetricsRow {
        method: args.method.clone(),
        pretrain_len: plan.prefix_items(),
        recent_len: plan.last_segment_len(),
        metrics,
    }];
    let mut out = create(&args.out)?;
    write_metrics_csv(&rows, &mut out)?;
    out.flush()?;
    RunManifest::new("eval", args)?
        .input(&args.data.data)
        .input(&args.checkpoint)
        .output(&args.out)
        .checkpoint(&args.checkpoint, crc)
        .write_for(&args.out)?;
    for k in &args.ks {
        println!("R@{k} {:.4}  N@{k} {:.4}", rows[0].metrics.recall(*k), rows[0].metrics.ndcg(*k));
    }
    Ok(())
}

fn infer_cmd(args: &InferCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    let (model, crc) = load_model(&args.checkpoint)?;
    let cache: ExpertCache = match (&args.cache, &args.prefix) {
        (Some(path), _) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let cache = read_cache(BufReader::new(file), &plan)?;
            if cache.checkpoint_crc() != crc {
                bail!(
                    "PlanMismatch: cache was built by checkpoint {:08x}, loaded checkpoint is {crc:08x}",
                    cache.checkpoint_crc()
                );
            }
            cache
        }
        (None, prefix) => compress_segments(&model, prefix.as_deref().unwrap_or(&[]), &plan, crc)?,
    };
    let recs = autoregress(&model, &cache, &args.recent, args.steps, args.k)?;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    if args.steps == 1 {
        writeln!(w, "rank\titem_id\tscore")?;
        for (r, (item, score)) in recs[0].items.iter().enumerate() {
            writeln!(w, "{}\t{}\t{:.6}", r + 1, item, score)?;
        }
    } else {
        writeln!(w, "step\trank\titem_id\tscore")?;
        for (s, rec) in recs.iter().enumerate() {
            for (r, (item, score)) in rec.items.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}\t{:.6}", s + 1, r + 1, item, score)?;
            }
        }
    }
    w.flush()?;
    if let Some(path) = &args.save_cache {
        let mut out = create(path)?;
        write_cache(&cache, &mut out)?;
        out.flush()?;
        RunManifest::new("infer", args)?
            .input(&args.checkpoint)
            .output(path)
            .checkpoint(&args.checkpoint, crc)
            .write_for(path)?;
    }
    Ok(())
}

fn mask_cmd(args: &MaskCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    print!("{}", segmented_mask(&plan).dump());
    Ok(())
}

fn cost_cmd(args: &CostCmd) -> Result<()> {
    let params = CostParams {
        num_layers: args.layers,
        n: args.n,
        d: args.d,
        k: args.k,
        m: args.m,
    };
    let mut report = cost_report(&params)?;
    if let Some(ffn) = args.ffn {
        report = report.with_calibration(&Calibration::for_ffn(args.d, ffn))?;
    }
    print!("{report}");
    if let Some(path) = &args.csv {
        let mut w = create(path)?;
        writeln!(w, "{}", CostReport::csv_header())?;
        writeln!(w, "{}", report.csv_row())?;
        w.flush()?;
        RunManifest::new("cost", args)?.output(path).write_for(path)?;
    }
    Ok(())
}

fn decay_cmd(args: &DecayCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    let h = Histories::load(&args.data)?;
    let (model, crc) = load_model(&args.checkpoint)?;
    let total = plan.total_items();
    let mut caches = Vec::new();
    let mut sequences = Vec::new();
    for (train, test) in h.train.iter().zip(&h.test) {
        if train.len() < total {
            continue;
        }
        let (input, p) = plan_input(train, &plan)?;
        caches.push(compress_segments(&model, &input[..p.prefix_items()], &p, crc)?);
        let mut seq = input.to_vec();
        seq.extend_from_slice(test);
        sequences.push(seq);
    }
    let users: Vec<DecayUser> = caches
        .iter()
        .zip(&sequences)
        .map(|(cache, sequence)| DecayUser {
            cache,
            sequence,
            train_len: total,
        })
        .collect();
    let window = args.window.unwrap_or(plan.last_segment_len());
    let series = decay_eval(&model, &users, window, args.stride, &args.ks)?;
    let mut out = create(&args.out)?;
    write_decay_csv(&[(args.method.as_str(), &series)], &mut out)?;
    out.flush()?;
    RunManifest::new("decay", args)?
        .input(&args.data.data)
        .input(&args.checkpoint)
        .output(&args.out)
        .checkpoint(&args.checkpoint, crc)
        .write_for(&args.out)?;
    eprintln!(
        "{} offsets over {} users, cache fingerprint {:08x}",
        series.points.len(),
        users.len(),
        series.points.first().map_or(0, |p| p.cache_fingerprint)
    );
    Ok(())
}

fn parse_setting(line: &str, pretrain: usize, recent: usize) -> Result<SegmentationPlan> {
    if line.contains("segments") {
        return Ok(line.parse()?);
    }
    let inner = line.trim().trim_start_matches('[').trim_end_matches(']');
    let experts = inner
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| anyhow!("PlanSyntax: bad placement setting {line:?}"))?;
    Ok(placement_plan(pretrain, recent, &experts)?)
}

fn placement_cmd(args: &PlacementCmd) -> Result<()> {
    let text = std::fs::read_to_string(&args.settings)
        .with_context(|| format!("reading {}", args.settings.display()))?;
    let settings = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| parse_setting(l, args.pretrain_len, args.recent_len))
        .collect::<Result<Vec<_>>>()?;
    let h = Histories::load(&args.data)?;
    let vocab = h.dataset.vocab_size;
    let make = |plan: &SegmentationPlan| {
        init_model(&model_config(&args.model, vocab, plan)).expect("model flags validated below")
    };
    if let Some(first) = settings.first() {
        model_config(&args.model, vocab, first).validate()?;
    }
    let rows = placement_compare(make, &args.train.config(), &settings, &h.train, &h.targets(), &args.ks)?;
    let mut out = create(&args.out)?;
    write_placement_csv(&rows, &mut out)?;
    out.flush()?;
    RunManifest::new("placement", args)?
        .seed("model", u64::from(args.model.model_seed))
        .seed("shuffle", args.train.seed)
        .input(&args.data.data)
        .input(&args.settings)
        .output(&args.out)
        .write_for(&args.out)?;
    Ok(())
}

fn attribute_cmd(args: &AttributeCmd) -> Result<()> {
    let plan = args.plan.plan()?;
    let h = Histories::load(&args.data)?;
    let (model, crc) = load_model(&args.checkpoint)?;
    let idx = h
        .user_ids
        .iter()
        .position(|&u| u == args.user)
        .ok_or_else(|| anyhow!("user {} not found", args.user))?;
    let history = &h.train[idx];
    let total = plan.total_items();
    if history.len() < total {
        bail!("LengthMismatch: plan covers {total} items, user has {}", history.len());
    }
    let events = &history[history.len() - total..];
    let atts = attribute_experts(&model, events, &plan, args.top_n)?;
    let mut w: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    writeln!(w, "expert_slot\trank\tsegment_position\titem_id\tweight\tresidual_norm")?;
    for a in &atts {
        for (r, t) in a.top_items.iter().enumerate() {
            let item = match &h.dataset.item_map {
                Some(map) => decode_item(map, t.item_id).unwrap_or(u64::from(t.item_id)),
                None => u64::from(t.item_id),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                a.expert_slot,
                r + 1,
                t.segment_position,
                item,
                t.weight,
                a.residual_norm
            )?;
        }
    }
    w.flush()?;
    if let Some(path) = &args.out {
        RunManifest::new("attribute", args)?
            .input(&args.data.data)
            .input(&args.checkpoint)
            .output(path)
            .checkpoint(&args.checkpoint, crc)
            .write_for(path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Mask(a) => mask_cmd(a),
        Command::Cost(a) => cost_cmd(a),
        Command::Decay(a) => decay_cmd(a),
        Command::Placement(a) => placement_cmd(a),
        Command::Attribute(a) => attribute_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
