use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand};

use perceiver_vl::checkpoint::{load_checkpoint, save_checkpoint};
use perceiver_vl::config::{FinetuneTask, RunConfig};
use perceiver_vl::corpus::{generate, Corpus, CorpusConfig, Split};
use perceiver_vl::cost::{
    baseline_selfattn_macs, embedding_macs, gflops, sweep_csv, CostReport, SweepSpec, SweepVariable,
};
use perceiver_vl::encoder::{sample_layerdrop_mask, Aggregation, DepthMode, LatentPos};
use perceiver_vl::model::PerceiverVl;
use perceiver_vl::retrieval::{evaluate_retrieval, StreamMode};
use perceiver_vl::sweep::run_sweep;
use perceiver_vl::tensor::{ParamStore, Rng, Sample};
use perceiver_vl::training::{
    evaluate_pretrain, evaluate_qa, finetune_qa, finetune_retrieval, pretrain, pretrain_grad_check, MaskSpec,
};
use perceiver_vl::{selftest, Error};

#[derive(Parser)]
#[command(name = "perceiver-vl", version, about = "Latent vision-language encoder on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run only the first c cross-attentions at inference.
    #[arg(long, global = true, value_name = "c")]
    layerdrop_infer: Option<usize>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["single", "multi", "mixed"])
        .map(|s| s.parse::<StreamMode>().expect("listed value")))]
    stream: Option<StreamMode>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["joint", "separate", "separate+"])
        .map(|s| s.parse::<Aggregation>().expect("listed value")))]
    aggregation: Option<Aggregation>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["learned", "fourier"])
        .map(|s| s.parse::<LatentPos>().expect("listed value")))]
    latent_pos: Option<LatentPos>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Pretrain with VTM + MLM and write a checkpoint.
    Train,
    /// Finetune a checkpoint for retrieval (per --stream) or QA.
    Finetune,
    /// Text-to-vision retrieval on the test split.
    EvalRetrieval,
    /// QA accuracy on the test split.
    EvalQa,
    /// Cost report of one forward pass against the self-attention baseline.
    Flops,
    /// Instrumented MAC sweep written as CSV.
    Sweep,
    /// Retrieval wall-clock per stream mode.
    Bench,
    /// Finite-difference check of the VTM+MLM gradients in f64.
    GradCheck,
    /// Run the invariant suite.
    Selftest,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.layerdrop_infer {
            cfg.layerdrop_infer = Some(c);
        }
        if let Some(s) = self.stream {
            cfg.stream = s;
        }
        if let Some(a) = self.aggregation {
            cfg.model.encoder.aggregation = a;
        }
        if let Some(p) = self.latent_pos {
            cfg.model.encoder.latent_pos = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.data_dir)
        .with_context(|| format!("reading corpus in {} (run gen-data first)", cfg.data_dir.display()))
}

fn inference_mask(cfg: &RunConfig, k: usize) -> Result<Vec<bool>> {
    let mode = cfg.layerdrop_infer.map_or(DepthMode::Eval, DepthMode::Fixed);
    Ok(sample_layerdrop_mask(k, 0.0, &mut Rng::new(0), mode)?)
}

/// Restores the configured checkpoint. Architecture flags must agree with it.
fn load_model(cfg: &RunConfig, cli: &Cli) -> Result<(PerceiverVl, ParamStore<f32>)> {
    let ckpt = load_checkpoint(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let m = &ckpt.header.model;
    if cli.aggregation.is_some_and(|a| a != m.encoder.aggregation)
        || cli.latent_pos.is_some_and(|p| p != m.encoder.latent_pos)
    {
        return Err(Error::Config("architecture flags differ from the checkpoint".into()).into());
    }
    let (model, mut store) = PerceiverVl::init::<f32>(m, ckpt.header.seed)?;
    ckpt.restore(&mut store)?;
    Ok((model, store))
}

fn gen_data(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus_cfg = CorpusConfig {
        seed: cli.seed.unwrap_or(cfg.corpus.seed),
        ..cfg.corpus.clone()
    };
    let corpus = generate(&corpus_cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    corpus.save(&dir)?;
    let videos = corpus.items.iter().filter(|i| i.is_video()).count();
    println!(
        "wrote {} items ({} train / {} val / {} test, {videos} videos) to {}",
        corpus.items.len(),
        corpus_cfg.train,
        corpus_cfg.val,
        corpus_cfg.test,
        dir.display()
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (model, mut store) = PerceiverVl::init::<f32>(&cfg.model, cfg.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.checkpoint.clone());
    let log_path = out.with_extension("jsonl");
    let mut log = fs::File::create(&log_path)?;
    let history = pretrain(&model, &mut store, &corpus.split(Split::Train), &cfg.pretrain, cfg.seed, Some(&mut log))?;
    save_checkpoint(&out, &cfg.model, &store, cfg.seed, history.len() as u64)?;
    let val = corpus.split(Split::Val);
    let active = inference_mask(cfg, cfg.model.encoder.k)?;
    let m = evaluate_pretrain(&model, &store, &val, &MaskSpec::default(), &active, cfg.seed)?;
    println!("trained {} steps; checkpoint {}, log {}", history.len(), out.display(), log_path.display());
    println!("val acc_vtm {:.4} acc_mlm {:.4}", m["acc_vtm"], m["acc_mlm"]);
    Ok(())
}

fn finetune(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (model, mut store) = load_model(cfg, cli)?;
    let train = corpus.split(Split::Train);
    let (tag, history) = match cfg.task {
        FinetuneTask::Retrieval => {
            let tag = format!("ret-{}", cfg.stream);
            let out = cli.out.clone().unwrap_or_else(|| cfg.checkpoint.with_extension(format!("{tag}.ckpt")));
            let mut log = fs::File::create(out.with_extension("jsonl"))?;
            let h = finetune_retrieval(&model, &mut store, &train, cfg.stream, &cfg.finetune, cfg.seed, Some(&mut log))?;
            ((tag, out), h)
        }
        FinetuneTask::Qa => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.checkpoint.with_extension("qa.ckpt"));
            let mut log = fs::File::create(out.with_extension("jsonl"))?;
            let h = finetune_qa(&model, &mut store, &train, &cfg.finetune, cfg.seed, Some(&mut log))?;
            (("qa".to_string(), out), h)
        }
    };
    let (name, out) = tag;
    save_checkpoint(&out, &model.cfg, &store, cfg.seed, history.len() as u64)?;
    println!("finetuned {name} for {} steps; checkpoint {}", history.len(), out.display());
    Ok(())
}

fn eval_retrieval(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (model, store) = load_model(cfg, cli)?;
    let mut test = corpus.split(Split::Test);
    if cfg.eval.corpus_size > 0 {
        test.truncate(cfg.eval.corpus_size);
    }
    let active = inference_mask(cfg, model.cfg.encoder.k)?;
    let r = evaluate_retrieval(&model, &store, &test, cfg.stream, &active, cfg.eval.cache)?;
    let active_n = active.iter().filter(|&&a| a).count();
    println!(
        "{} stream, C={}, {active_n}/{} cross-attentions: R@1 {:.2} R@5 {:.2} R@10 {:.2}, {} MACs/query, {:.1} ms",
        r.mode,
        r.corpus_size,
        active.len(),
        100.0 * r.recall.r1,
        100.0 * r.recall.r5,
        100.0 * r.recall.r10,
        r.query_macs,
        r.wall_ns as f64 / 1e6
    );
    let mut report = serde_json::json!({ "eval": r });
    if cfg.layerdrop_infer.is_some() {
        let full = evaluate_retrieval(&model, &store, &test, cfg.stream, &model.full_depth(), cfg.eval.cache)?;
        let saved = full.query_macs as i128 - r.query_macs as i128;
        println!(
            "full depth: R@1 {:.2}; fixed({active_n}) saves {saved} MACs/query ({:.1}%), R@1 change {:+.2}",
            100.0 * full.recall.r1,
            100.0 * saved as f64 / full.query_macs.max(1) as f64,
            100.0 * (r.recall.r1 - full.recall.r1)
        );
        report["full_depth"] = serde_json::to_value(&full)?;
    }
    if let Some(p) = &cli.out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn eval_qa(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (model, store) = load_model(cfg, cli)?;
    let active = inference_mask(cfg, model.cfg.encoder.k)?;
    let m = evaluate_qa(&model, &store, &corpus.split(Split::Test), &active)?;
    println!("QA accuracy {:.4} over {} questions", m["acc_qa"], m["questions"]);
    if let Some(p) = &cli.out {
        fs::write(p, serde_json::to_string_pretty(&m)?)?;
    }
    Ok(())
}

fn flops(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sweep;
    let p = cfg.model.embed.patch as u64;
    if s.frame_size % p != 0 {
        bail!(Error::Config(format!("frame_size {} not divisible by patch {p}", s.frame_size)));
    }
    let m_v = s.frames * (s.frame_size / p).pow(2);
    let m_t = s.text_len;
    let active = inference_mask(cfg, cfg.model.encoder.k)?;
    let report = CostReport::forward(&cfg.model, m_v, m_t, 1, 0, &active)?;
    let e = &cfg.model.encoder;
    let depth = cfg.sweep_spec().baseline_depth();
    let baseline = baseline_selfattn_macs(depth, e.d as u64, m_v + m_t, e.mlp_ratio as u64);
    let embed = embedding_macs(m_v, cfg.model.embed.patch_dim() as u64, e.d as u64);
    println!("input: M_v={m_v} M_t={m_t}; N={} d={} k={} l={}", e.n_latents, e.d, e.k, e.l);
    println!("embedding          {:>16} MACs", embed);
    println!("latent encoder     {:>16} MACs", report.encoder());
    println!("baseline (depth {depth:>2}) {:>15} MACs", baseline);
    println!("forward total      {:>16} MACs ({:.4} GFLOPs)", report.total, report.gflops());
    println!(
        "encoder ratio latent/baseline {:.4} (baseline {:.2}x), baseline total {:.4} GFLOPs",
        report.encoder() as f64 / baseline as f64,
        baseline as f64 / report.encoder() as f64,
        gflops(baseline + embed)
    );
    if let Some(path) = &cli.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn sweep(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let rows = run_sweep(&cfg.sweep_spec(), cfg.seed)?;
    write_out(cli.out.as_deref(), &sweep_csv(&rows))
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

fn bench(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let c = cfg.bench.corpus_size;
    let spec = SweepSpec {
        variable: SweepVariable::CorpusSize,
        grid: vec![c],
        ..cfg.sweep_spec()
    };
    let runs = cfg.bench.runs.max(1);
    let mut walls: Vec<(String, u64, Vec<u128>)> = Vec::new();
    for _ in 0..runs {
        for row in run_sweep(&spec, cfg.seed)? {
            match walls.iter_mut().find(|w| w.0 == row.mode) {
                Some(w) => w.2.push(row.wall_ns),
                None => walls.push((row.mode.clone(), row.measured_mac, vec![row.wall_ns])),
            }
        }
    }
    let mut csv = String::from("mode,corpus_size,query_macs,median_wall_ns,runs\n");
    println!("C={c}, {runs} runs, visual latents cached for mixed/multi");
    for (mode, macs, w) in walls {
        let med = median(w);
        println!("{mode:>6}: {macs:>14} MACs/query, median {:>10.3} ms", med as f64 / 1e6);
        csv.push_str(&format!("{mode},{c},{macs},{med},{runs}\n"));
    }
    if let Some(p) = &cli.out {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn grad_check(cfg: &RunConfig) -> Result<bool> {
    let corpus = generate(&CorpusConfig {
        train: 8,
        val: 2,
        test: 2,
        ..cfg.corpus.clone()
    })?;
    let items = corpus.split(Split::Train);
    let r = pretrain_grad_check(
        &cfg.model,
        &items,
        4,
        cfg.seed,
        Sample::Fraction { fraction: 0.01, seed: cfg.seed },
        1e-5,
        1e-4,
    )?;
    for (name, err) in r.per_param() {
        println!("{name:<40} {err:.3e}");
    }
    println!(
        "{} entries checked, max relative error {:.3e} (tol {:.0e}): {}",
        r.entries.len(),
        r.max_rel_error,
        r.tol,
        if r.passed { "PASS" } else { "FAIL" }
    );
    Ok(r.passed)
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = cli.run_config()?;
    match cli.command {
        Command::GenData => gen_data(cli, &cfg)?,
        Command::Train => train(cli, &cfg)?,
        Command::Finetune => finetune(cli, &cfg)?,
        Command::EvalRetrieval => eval_retrieval(cli, &cfg)?,
        Command::EvalQa => eval_qa(cli, &cfg)?,
        Command::Flops => flops(cli, &cfg)?,
        Command::Sweep => sweep(cli, &cfg)?,
        Command::Bench => bench(cli, &cfg)?,
        Command::GradCheck => {
            if !grad_check(&cfg)? {
                return Ok(3);
            }
        }
        Command::Selftest => {
            let checks = selftest::run(cfg.seed);
            let mut out = std::io::stdout().lock();
            for c in &checks {
                writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
            }
            if checks.iter().any(|c| c.numeric) {
                return Ok(3);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
