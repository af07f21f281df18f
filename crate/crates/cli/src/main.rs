mod config;

use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spa_core::eval::{perplexity, run_experiment_suite, usage_percentage, SuiteConfig, TierInput};
use spa_core::latency::{build_comparison_table, render_csv, render_json, render_table, ComparisonOptions, LatencyProfile};
use spa_core::model::SpaModel;
use spa_core::runtime::{
    connect_and_run, decode_monolithic, serve_cloud, DecodeConfig, DeviceClient, GatingPolicy, Strategy, WireMode,
    FRAME_TIMEOUT,
};
use spa_core::train::{
    decode, encode, encode_document, make_synthetic_personalized_corpus, pretrain_base, select_learning_rate,
    train_side_and_gate, Checkpoint, Corpus, SideObjective, SizeTier, EOS, LEARNING_RATE_GRID,
};

use config::CliConfig;

/// Split cloud/device generation with a frozen base model and a gated side network.
#[derive(Debug, Parser)]
#[command(name = "spa", version)]
struct Cli {
    /// Config file; falls back to $SPA_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic generic and personalized corpora.
    MakeCorpus {
        #[arg(long, default_value = "all")]
        tier: String,
    },
    /// Train the base model on the generic corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "checkpoints/base.ckpt")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the side network and gate against a frozen base.
    TrainSide {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Device-side subset of the trained checkpoint.
        #[arg(long)]
        device_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ObjectiveArg::Spa)]
        objective: ObjectiveArg,
        /// Single learning rate instead of the grid search.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Host the cloud endpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, default_value = "all-layers")]
        wire: WireMode,
        #[arg(long)]
        max_sessions: Option<usize>,
    },
    /// Run the device endpoint against a cloud endpoint.
    Generate {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        side_checkpoint: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decode in one process without networking.
    DecodeLocal {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "all-layers")]
        wire: WireMode,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Print the analytic latency comparison.
    BenchLatency {
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long, default_value_t = 0.62)]
        usage: f64,
        #[arg(long, default_value_t = 50)]
        tokens: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Divide by the processor count instead of multiplying.
        #[arg(long)]
        cdev_divides: bool,
        /// Per-architecture transmission costs backed out of the reference table.
        #[arg(long)]
        paper_costs: bool,
    },
    /// Perplexity and gate usage on a corpus's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "policy")]
        policies: Vec<GatingPolicy>,
    },
    /// Run the experiment suite and write Markdown and CSV reports.
    Report {
        #[arg(long, value_delimiter = ',', default_value = "small,medium,full")]
        tiers: Vec<SizeTier>,
        #[arg(long, default_value_t = 40)]
        max_prompts: usize,
        #[arg(long, default_value_t = 50)]
        max_new: usize,
    },
    /// Finite-difference check of side and gate gradients.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "spa")]
    policy: GatingPolicy,
    /// Beam width; greedy when absent.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value_t = 50)]
    max_new: usize,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: self.max_new,
            strategy: if self.beam.is_some() { Strategy::Beam } else { Strategy::Greedy },
            beam_width: self.beam.unwrap_or(1),
            policy: self.policy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Spa,
    Ladder,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_model(path: &Path) -> Result<(SpaModel, Checkpoint), Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let model = ckpt.into_model().map_err(rt)?;
    Ok((model, ckpt))
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(rt)?;
    }
    ckpt.save(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    if !path.is_dir() {
        return Err(Failure::Usage(format!("--corpus: {} is not a directory", path.display())));
    }
    Corpus::from_dir(path).map_err(rt)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = CliConfig::resolve(cli.config.as_deref()).map_err(Failure::Usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    cfg.pretrain.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::MakeCorpus { tier } => {
            let tiers: Vec<SizeTier> = if tier == "all" {
                SizeTier::ALL.to_vec()
            } else {
                vec![tier.parse().map_err(|e: String| Failure::Usage(format!("--tier: {e}")))?]
            };
            let root = cfg.output(&cfg.paths.corpus).map_err(Failure::Usage)?;
            for t in tiers {
                let (base, personal) = make_synthetic_personalized_corpus(cfg.seed, t);
                base.write_dir(&root.join("base")).map_err(rt)?;
                let dir = root.join(format!("personal-{}", t.name()));
                personal.write_dir(&dir).map_err(rt)?;
                writeln!(out, "{}: {} generic, {} personalized documents in {}", t.name(), base.len(), personal.len(), root.display())
                    .map_err(rt)?;
            }
        }
        Command::Pretrain { corpus, out: dest, epochs } => {
            let dest = cfg.output(&dest).map_err(Failure::Usage)?;
            let corpus = load_corpus(&cfg.input(&corpus))?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let pre = pretrain_base(&cfg.model, &cfg.pretrain, &corpus).map_err(rt)?;
            for e in &pre.history {
                info!("epoch {} train {:.4} val ppl {:.3}", e.epoch, e.train_loss, e.val_perplexity);
            }
            let ckpt = Checkpoint::from_base(&cfg.model, &pre.base);
            save(&ckpt, &dest)?;
            writeln!(out, "base checksum {}\nwrote {}", pre.base.checksum(), dest.display()).map_err(rt)?;
        }
        Command::TrainSide {
            base,
            corpus,
            out: dest,
            device_out,
            objective,
            lr,
            epochs,
        } => {
            let dest = cfg.output(&dest).map_err(Failure::Usage)?;
            let device_out = device_out.map(|p| cfg.output(&p)).transpose().map_err(Failure::Usage)?;
            let corpus = load_corpus(&cfg.input(&corpus))?;
            let base_path = cfg.input(&base);
            let ckpt = Checkpoint::load(&base_path).map_err(|e| Failure::Runtime(format!("{}: {e}", base_path.display())))?;
            let base = ckpt.into_base().map_err(rt)?;
            let model = SpaModel::from_base(ckpt.header.model.clone(), base, cfg.seed).map_err(rt)?;
            cfg.train.objective = match objective {
                ObjectiveArg::Spa => SideObjective::Spa,
                ObjectiveArg::Ladder => SideObjective::Ladder,
            };
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let run = match lr {
                Some(lr) => {
                    cfg.train.learning_rate = lr;
                    train_side_and_gate(&model, &corpus, &cfg.train).map_err(rt)?
                }
                None => {
                    let grid = select_learning_rate(&model, &corpus, &cfg.train, &LEARNING_RATE_GRID).map_err(rt)?;
                    for r in &grid.runs {
                        info!("lr {:e}: final val loss {:.4}", r.config.learning_rate, r.final_val_loss());
                    }
                    grid.runs.into_iter().nth(grid.best).expect("best index in range")
                }
            };
            for e in &run.history {
                info!(
                    "epoch {} train {:.4} val ppl {:.3} usage {:.1}%",
                    e.epoch,
                    e.train_loss,
                    e.val_perplexity,
                    100.0 * e.usage_rate
                );
            }
            if run.base_checksum_before != run.base_checksum_after {
                return Err(Failure::Check("base parameters changed during side training".into()));
            }
            save(&Checkpoint::from_model(&run.model, Some(&run.config)), &dest)?;
            if let Some(d) = device_out {
                save(&Checkpoint::device(&run.model, Some(&run.config)), &d)?;
            }
            let last = run.history.last();
            writeln!(
                out,
                "lr {:e}, val ppl {:.4}, usage {:.1}%, base checksum unchanged\nwrote {}",
                run.config.learning_rate,
                last.map_or(f64::NAN, |e| e.val_perplexity),
                last.map_or(f64::NAN, |e| 100.0 * e.usage_rate),
                dest.display()
            )
            .map_err(rt)?;
        }
        Command::Serve {
            checkpoint,
            listen,
            wire,
            max_sessions,
        } => {
            let (model, _) = load_model(&cfg.input(&checkpoint))?;
            let listener = TcpListener::bind(&listen).map_err(|e| Failure::Runtime(format!("{listen}: {e}")))?;
            let server = serve_cloud(Arc::new(model), listener, wire, max_sessions, FRAME_TIMEOUT).map_err(rt)?;
            writeln!(out, "listening on {}", server.addr).map_err(rt)?;
            out.flush().map_err(rt)?;
            let failed = server.join().into_iter().filter(|r| r.is_err()).count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} sessions failed")));
            }
        }
        Command::Generate {
            connect,
            side_checkpoint,
            decode: d,
        } => {
            let path = cfg.input(&side_checkpoint);
            let ckpt = Checkpoint::load(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let client = DeviceClient::new(ckpt.into_device_model().map_err(rt)?, &ckpt.header.base_checksum);
            let outcome = connect_and_run(&client, &connect, &encode(&d.prompt), &d.config()).map_err(rt)?;
            print_generation(&mut out, &d.prompt, &outcome.tokens, &outcome.sigma_trace, Some(outcome.counter.m()))?;
        }
        Command::DecodeLocal {
            checkpoint,
            wire,
            decode: d,
        } => {
            let (model, _) = load_model(&cfg.input(&checkpoint))?;
            let o = decode_monolithic(&model, &encode(&d.prompt), &d.config(), wire.rung_source()).map_err(rt)?;
            print_generation(&mut out, &d.prompt, &o.tokens, &o.sigma_trace, None)?;
        }
        Command::BenchLatency {
            profile,
            layers,
            usage,
            tokens,
            format,
            cdev_divides,
            paper_costs,
        } => {
            let path = profile.or_else(|| cfg.latency_profile.clone());
            let p = match path {
                Some(p) => LatencyProfile::load(&p).map_err(|e| Failure::Usage(e.to_string()))?,
                None => LatencyProfile::paper_calibration(),
            };
            let mut opts = ComparisonOptions {
                n_tokens: tokens,
                cdev_divides,
                ..Default::default()
            };
            if paper_costs {
                opts = opts.paper_costs();
            }
            let rows = build_comparison_table(&p, usage, layers, &opts).map_err(|e| Failure::Usage(e.to_string()))?;
            let text = match format {
                Format::Table => render_table(&rows),
                Format::Csv => render_csv(&rows),
                Format::Json => render_json(&rows) + "\n",
            };
            write!(out, "{text}").map_err(rt)?;
        }
        Command::Eval {
            checkpoint,
            corpus,
            policies,
        } => {
            let (model, _) = load_model(&cfg.input(&checkpoint))?;
            let corpus = load_corpus(&cfg.input(&corpus))?;
            let test = corpus.subset(&corpus.split(cfg.seed).test);
            let policies = if policies.is_empty() {
                vec![
                    GatingPolicy::SpaClassifier,
                    GatingPolicy::AlwaysSide,
                    GatingPolicy::DeviceOnly,
                    GatingPolicy::BaseOnly,
                ]
            } else {
                policies
            };
            for p in policies {
                let ppl = perplexity(&model, &test, p).map_err(rt)?;
                let mut sigma = Vec::new();
                for d in &test {
                    sigma.extend(model.teacher_forced(&encode_document(d), p.gate_mode()).map_err(rt)?.sigma);
                }
                let usage = usage_percentage(&sigma).map_err(rt)?;
                writeln!(out, "{p}: perplexity {ppl:.4}, usage {usage:.1}%").map_err(rt)?;
            }
        }
        Command::Report {
            tiers,
            max_prompts,
            max_new,
        } => {
            let ckpts = cfg.input(&cfg.paths.checkpoints);
            let corpora = cfg.input(&cfg.paths.corpus);
            let reports = cfg.output(&cfg.paths.reports).map_err(Failure::Usage)?;
            let inputs = tiers
                .iter()
                .map(|t| {
                    let dir = corpora.join(format!("personal-{}", t.name()));
                    let test_documents = match Corpus::from_dir(&dir) {
                        Ok(c) => c.subset(&c.split(cfg.seed).test).into_iter().map(str::to_owned).collect(),
                        Err(e) => {
                            log::warn!("{e}");
                            Vec::new()
                        }
                    };
                    TierInput {
                        tier: t.name().to_string(),
                        spa_checkpoint: ckpts.join(format!("spa-{}.ckpt", t.name())),
                        lst_checkpoint: Some(ckpts.join(format!("lst-{}.ckpt", t.name()))),
                        test_documents,
                    }
                })
                .collect();
            let mut suite = SuiteConfig::new(inputs);
            suite.max_prompts = max_prompts;
            suite.decode.max_new_tokens = max_new;
            if let Some(p) = &cfg.latency_profile {
                suite.profile = LatencyProfile::load(p).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            let report = run_experiment_suite(&suite);
            let (md, csv) = report.write(&reports).map_err(rt)?;
            write!(out, "{}", report.to_markdown()).map_err(rt)?;
            writeln!(out, "\nwrote {} and {}", md.display(), csv.display()).map_err(rt)?;
        }
        Command::GradCheck { seeds, h, tol } => {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let seed = cfg.seed.wrapping_add(s);
                let model = SpaModel::new(cfg.model.clone(), seed).map_err(rt)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let len = rng.random_range(4..=12.min(cfg.model.max_seq_len));
                let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..EOS)).collect();
                let report = model
                    .check_trainable_gradients(&tokens, cfg.train.gate_margin, cfg.train.weights(), h, tol)
                    .map_err(rt)?;
                writeln!(out, "seed {seed}: {} parameters, max relative error {:.3e}", report.pairs.len(), report.max_rel_error)
                    .map_err(rt)?;
                worst = worst.max(report.max_rel_error);
            }
            if worst.is_nan() || worst >= tol {
                return Err(Failure::Check(format!("max relative error {worst:.3e} exceeds {tol:e}")));
            }
        }
    }
    Ok(())
}

fn print_generation(
    out: &mut impl std::io::Write,
    prompt: &str,
    tokens: &[u32],
    sigma: &[u8],
    m: Option<f64>,
) -> Result<(), Failure> {
    let body: Vec<u32> = tokens.iter().copied().take_while(|&t| t != EOS).collect();
    writeln!(out, "{prompt}{}", decode(&body)).map_err(rt)?;
    let usage = usage_percentage(sigma).unwrap_or(0.0);
    match m {
        Some(m) => writeln!(out, "tokens {}, usage {usage:.1}%, M {m:.4}", tokens.len()),
        None => writeln!(out, "tokens {}, usage {usage:.1}%", tokens.len()),
    }
    .map_err(rt)
}
