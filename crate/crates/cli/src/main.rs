//! `sysanchor`: train, evaluate and inspect span-anchored adapters on the
//! toy decoder, plus the budget calculators.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when the command fails.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use sysanchor::budget::{
    count_adapter_params, flops, solve_lora_rank, speedup_ratio, speedup_ratio_f64, AdapterMethod, FlopBudget,
    LoraBudgetProblem, DEFAULT_RANK_CAP, LORA_MODULES,
};
use sysanchor::checkpoint::Checkpoint;
use sysanchor::config::RunConfig;
use sysanchor::harness;
use sysanchor::probe::{kv_cache_report, measure_magnitudes, write_heatmap_csv};
use sysanchor::task::ADHERENCE_HEADER;
use sysanchor::tokenizer::ToyTokenizer;
use sysanchor::train::collate;
use sysanchor::{detect_span, resolve_placement, Dialect, Model, PlacementName};

#[derive(Parser)]
#[command(name = "sysanchor", version, about = "Span-anchored cross-attention adapters on a frozen toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the backbone, train the adapters, write logs and checkpoints.
    Train(TrainArgs),
    /// Adherence and held-out loss of a checkpoint and of its bare backbone.
    Eval(EvalArgs),
    /// Per-layer magnitude heatmap and CAL cache report for a checkpoint.
    Probe(ProbeArgs),
    /// Occupied layers of the named placements as `config,layer` CSV.
    Placements(PlacementArgs),
    /// Equal-rank LoRA configuration matching a parameter budget.
    LoraRank(LoraArgs),
    /// Training FLOPs of LoRA vs CAL and their ratio.
    Flops(FlopArgs),
    /// Span bounds of whitespace-tokenized sequences, one per line.
    Spans(SpanArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (flat TOML); omitted keys take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Heatmap CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of held-out sequences to average over.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    decode_steps: usize,
}

#[derive(Args)]
struct PlacementArgs {
    #[arg(long)]
    layers: usize,
    /// One placement; all eight when omitted.
    #[arg(long)]
    config: Option<PlacementName>,
}

#[derive(Args)]
struct LoraArgs {
    /// Budget to match; defaults to the CAL parameter count for these dims.
    #[arg(long)]
    target: Option<u64>,
    #[arg(long)]
    layers: u64,
    #[arg(long)]
    hidden: u64,
    #[arg(long)]
    d_kv: u64,
    #[arg(long)]
    intermediate: u64,
    #[arg(long, default_value_t = DEFAULT_RANK_CAP)]
    cap: u64,
    #[arg(long, conflicts_with = "cap")]
    no_cap: bool,
    /// Placement for the CAL budget when --target is omitted.
    #[arg(long, default_value = "late8th")]
    placement: PlacementName,
    /// Heads for the CAL budget when --target is omitted.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct FlopArgs {
    /// Backbone parameters.
    #[arg(long)]
    pb: u128,
    /// Adapter parameters.
    #[arg(long)]
    pa: u128,
    /// Tokens per sequence.
    #[arg(long)]
    seq: u128,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SpanArgs {
    /// Input file; stdin when omitted.
    input: Option<PathBuf>,
    #[arg(long, default_value = "chatml")]
    dialect: Dialect,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_model(&cfg.model())?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.toml"), cfg.to_text())?;
    let mut log = BufWriter::new(File::create(args.out.join("train_log.csv"))?);
    writeln!(log, "step,loss,grad_norm,lr")?;
    let every = cfg.checkpoint_every.filter(|&n| n > 0);
    let out_dir = args.out.clone();
    let outcome = harness::run(&cfg, |trainer, step| {
        writeln!(log, "{},{:.6},{:.6},{:.6e}", step.step, step.loss, step.grad_norm, step.lr)?;
        let done = step.step + 1;
        if every.is_some_and(|n| done % n == 0) {
            Checkpoint::from_model(trainer.model()).save(out_dir.join(format!("step-{done}.clrx")))?;
            fs::write(out_dir.join(format!("state-{done}.json")), trainer.snapshot().to_json()?)?;
        }
        if done % 100 == 0 {
            info!("step {done}: loss {:.4}", step.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    if !outcome.pretrain_losses.is_empty() {
        let mut pre = BufWriter::new(File::create(args.out.join("pretrain_log.csv"))?);
        writeln!(pre, "step,loss")?;
        for (i, l) in outcome.pretrain_losses.iter().enumerate() {
            writeln!(pre, "{i},{l:.6}")?;
        }
        pre.flush()?;
    }
    let path = args.out.join("model.clrx");
    Checkpoint::from_model(&outcome.model).save(&path)?;
    info!("{} steps, checkpoint at {}", outcome.logs.len(), path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let base = model.base();
    let mut w = output(args.out.as_deref())?;
    writeln!(w, "{ADHERENCE_HEADER}")?;
    for (label, m) in [("base", &base), (cfg.adapter.as_str(), &model)] {
        let r = harness::evaluate(m, &cfg)?;
        writeln!(w, "{label},{:.4},{:.4}", r.adherence, r.adversarial_adherence)?;
        eprintln!("{label} held-out loss {:.6}", harness::held_out_loss(m, &cfg)?);
    }
    w.flush()?;
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let corpus = harness::probe_corpus(&cfg, args.samples.max(1))?;
    let refs: Vec<_> = corpus.iter().collect();
    let (batch, bounds, _) = collate(&refs, ToyTokenizer::PAD);
    let records = measure_magnitudes(&model, &batch, &bounds)?;
    let mut w = output(args.out.as_deref())?;
    write_heatmap_csv(&mut w, &records)?;
    w.flush()?;

    let first = &corpus[0];
    let prompt_len = first.loss_mask.iter().position(|&m| m).unwrap_or(first.ids.len());
    let prompt = &first.ids[..prompt_len];
    let kv = kv_cache_report(&model, prompt, &sysanchor::BatchBounds::new(vec![first.bounds]), args.decode_steps, ToyTokenizer::PAD)?;
    let n = kv.elements_per_step.first().copied().unwrap_or(0);
    eprintln!(
        "cal kv cache: {n} elements ({} bytes) over {} decode steps, constant: {}",
        n * kv.bytes_per_element,
        kv.elements_per_step.len(),
        kv.is_constant()
    );
    Ok(())
}

fn placements(args: PlacementArgs) -> Result<()> {
    let names = match args.config {
        Some(n) => vec![n],
        None => PlacementName::ALL_NAMES.to_vec(),
    };
    let mut w = output(None)?;
    writeln!(w, "config,layer")?;
    for name in names {
        for row in resolve_placement(name, args.layers)?.csv_rows() {
            writeln!(w, "{row}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn lora_rank(args: LoraArgs) -> Result<()> {
    let target = match args.target {
        Some(t) => t,
        None => {
            let cfg = sysanchor::ModelConfig {
                n_layers: args.layers as usize,
                d_model: args.hidden as usize,
                n_heads: args.heads,
                placement: args.placement,
                adapter: sysanchor::AdapterKind::Cal,
                ..sysanchor::ModelConfig::default()
            };
            count_adapter_params(&cfg)?
        }
    };
    let problem = LoraBudgetProblem {
        p_target: target,
        n_layers: args.layers,
        hidden: args.hidden,
        d_kv: args.d_kv,
        intermediate: args.intermediate,
        rank_cap: (!args.no_cap).then_some(args.cap),
    };
    let s = solve_lora_rank(&problem)?;
    let mut w = output(None)?;
    if args.csv {
        writeln!(w, "target,r,alpha,realized,kv_capped,clipped,infeasible")?;
        writeln!(w, "{target},{},{},{},{},{},{}", s.r, s.alpha, s.realized, s.kv_capped, s.clipped, s.infeasible)?;
    } else {
        writeln!(w, "target     {target}")?;
        writeln!(w, "realized   {}", s.realized)?;
        writeln!(w, "r          {}", s.r)?;
        writeln!(w, "alpha      {}", s.alpha)?;
        for (m, r) in LORA_MODULES.iter().zip(s.ranks) {
            writeln!(w, "  {m:<10} {r}")?;
        }
        let flags: Vec<&str> = [(s.kv_capped, "kv-capped"), (s.clipped, "clipped"), (s.infeasible, "infeasible")]
            .into_iter()
            .filter_map(|(on, f)| on.then_some(f))
            .collect();
        if !flags.is_empty() {
            writeln!(w, "notes      {}", flags.join(", "))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn flop_table(args: FlopArgs) -> Result<()> {
    let b = FlopBudget::new(args.pb, args.pa, args.seq)?;
    let (lora, cal) = (flops(AdapterMethod::Lora, &b), flops(AdapterMethod::Cal, &b));
    let rho = speedup_ratio(&b);
    let mut w = output(None)?;
    if args.csv {
        writeln!(w, "method,forward,backward,total")?;
        writeln!(w, "lora,{},{},{}", lora.forward, lora.backward, lora.total)?;
        writeln!(w, "cal,{},{},{}", cal.forward, cal.backward, cal.total)?;
    } else {
        writeln!(w, "{:<6} {:>24} {:>24} {:>24}", "method", "forward", "backward", "total")?;
        for (m, f) in [("lora", lora), ("cal", cal)] {
            writeln!(w, "{m:<6} {:>24} {:>24} {:>24}", f.forward, f.backward, f.total)?;
        }
    }
    writeln!(w, "rho = {:.4} ({}/{})", speedup_ratio_f64(&b), rho.numer(), rho.denom())?;
    w.flush()?;
    Ok(())
}

fn spans(args: SpanArgs) -> Result<()> {
    let input: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?)),
        None => Box::new(BufReader::new(io::stdin().lock())),
    };
    let mut w = output(None)?;
    for line in input.lines() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let span = detect_span(&tokens, args.dialect);
        writeln!(w, "{}\t{}", span.s, span.e)?;
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::Placements(a) => placements(a),
        Command::LoraRank(a) => lora_rank(a),
        Command::Flops(a) => flop_table(a),
        Command::Spans(a) => spans(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
