use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pairiq::aggregate::{AggregateConfig, MapConfig};
use pairiq::curation::{bt500_screen, curation_csv, curation_report, uniform_mos_sample, SubjectScores};
use pairiq::judges::{BiasedJudge, HttpJudge, HttpJudgeConfig, Judge, OracleJudge, ReplayJudge, ScoredJudge, ThurstoneJudge};
use pairiq::metrics::{eval_report, report_csv, report_table, Grouping};
use pairiq::model::{scores_csv, DatasetManifest, Method};
use pairiq::pairing::{self, PairingPlan, PlanKind, DEFAULT_MOS_BOUNDS};
use pairiq::session::{self, human::HumanSession, SessionConfig, SimJudge};

#[derive(Parser)]
#[command(name = "pairiq", version, about = "Paired-comparison image quality probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and print a summary.
    Validate { manifest: PathBuf },
    /// Write a pairing plan as JSONL.
    Pair {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Query a judge over a plan and write trials, matrix, scores and report.
    Run(RunArgs),
    /// Recompute scores.csv from a session's trials.jsonl.
    Aggregate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        agg: AggArgs,
        /// Output file; defaults to <session>/scores.csv.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Recompute report.csv from a session's trials.jsonl.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        agg: AggArgs,
        #[arg(long, value_enum)]
        group: Option<GroupArg>,
        /// Output file; defaults to <session>/report.csv.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Convergence of MAP scores over pairing rounds on synthetic data.
    Simulate {
        #[arg(long, default_value_t = 160)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        mmax: u32,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// oracle | thurstone:SIGMA | biased:P | noisy:SIGMA
        #[arg(long, default_value = "oracle")]
        judge: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve a plan to a human observer over HTTP.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// Read the plan from a JSONL file instead of generating it.
        #[arg(long, conflicts_with = "kind")]
        plan_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "s1")]
        session_id: String,
        /// Directory image paths are relative to; defaults to the manifest's.
        #[arg(long)]
        images: Option<PathBuf>,
        #[command(flatten)]
        agg: AggArgs,
    },
    /// Test-set construction helpers.
    Curate {
        #[command(subcommand)]
        what: CurateCommand,
    },
}

#[derive(Subcommand)]
enum CurateCommand {
    /// SI, CF and MOS band per image as CSV (PGM/PPM files).
    Attributes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Draw up to K images from each of five MOS bands.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest (.csv or .json).
        #[arg(long, short)]
        out: PathBuf,
    },
    /// BT.500 subject screening of a subjects × conditions CSV.
    Bt500 {
        #[arg(long)]
        scores: PathBuf,
        /// Per-condition MOS of the kept subjects as CSV.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Coarse,
    Type,
    Level,
    Mos,
}

impl From<KindArg> for PlanKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Coarse => PlanKind::CoarseRounds,
            KindArg::Type => PlanKind::FineSameContentType,
            KindArg::Level => PlanKind::FineSameContentLevel,
            KindArg::Mos => PlanKind::FineMosInterval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Dataset,
    Pooled,
    Cells,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, default_value_t = pairing::DEFAULT_ROUNDS)]
    rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// MOS interval bounds for `--kind mos`.
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
    /// Per-interval pair cap for `--kind mos`.
    #[arg(long)]
    cap: Option<usize>,
}

impl PlanArgs {
    fn build(&self, manifest: &DatasetManifest) -> Result<PairingPlan> {
        let plan = match self.kind.map(PlanKind::from).unwrap_or(PlanKind::CoarseRounds) {
            PlanKind::CoarseRounds => pairing::coarse_rounds(manifest, self.rounds, self.seed)?,
            PlanKind::FineSameContentType => pairing::fine_same_content_type(manifest)?,
            PlanKind::FineSameContentLevel => pairing::fine_same_content_level(manifest)?,
            PlanKind::FineMosInterval => {
                let bounds = self.bounds.clone().unwrap_or_else(|| DEFAULT_MOS_BOUNDS.to_vec());
                pairing::fine_mos_interval(manifest, &bounds, self.cap, self.seed)?
            }
        };
        for note in &plan.notes {
            log::warn!("{note}");
        }
        if plan.is_empty() {
            bail!("the pairing plan is empty");
        }
        Ok(plan)
    }
}

#[derive(Args)]
struct AggArgs {
    /// Aggregation methods; the first one feeds ρ in the report.
    #[arg(long = "methods", alias = "method", value_delimiter = ',', default_value = "map")]
    methods: Vec<Method>,
    /// Ridge weight of the MAP prior.
    #[arg(long)]
    ridge: Option<f64>,
}

impl AggArgs {
    fn config(&self) -> AggregateConfig {
        let mut cfg = AggregateConfig::default();
        if let Some(r) = self.ridge {
            cfg.map.ridge_weight = r;
        }
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    /// Read the plan from a JSONL file instead of generating it.
    #[arg(long, conflicts_with = "kind")]
    plan_file: Option<PathBuf>,
    /// oracle | thurstone:SIGMA | biased:P | scored:FILE | replay:FILE | http:CONFIG
    #[arg(long)]
    judge: String,
    /// Session directory; an existing one is resumed.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    agg: AggArgs,
    #[arg(long, default_value_t = 1)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 0.5)]
    max_failure_rate: f64,
    /// Directory image paths are relative to; defaults to the manifest's.
    #[arg(long)]
    images: Option<PathBuf>,
}

fn image_root(manifest: &Path, images: &Option<PathBuf>) -> PathBuf {
    images.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn build_judge(spec: &str, manifest: &DatasetManifest, seed: u64, images: &Path) -> Result<Box<dyn Judge>> {
    let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let need = |what: &str| -> Result<&str> {
        if arg.is_empty() {
            bail!("judge `{name}` needs {what}, e.g. `{name}:<{what}>`");
        }
        Ok(arg)
    };
    Ok(match name {
        "oracle" => Box::new(OracleJudge::from_manifest(manifest)),
        "thurstone" => Box::new(ThurstoneJudge::from_manifest(manifest, need("sigma")?.parse()?, seed)?),
        "biased" => Box::new(BiasedJudge::new(need("p")?.parse()?, seed)?),
        "scored" => Box::new(ScoredJudge::load(need("file")?)?),
        "replay" => Box::new(ReplayJudge::new(session::load_trials(need("file")?)?)),
        "http" => Box::new(HttpJudge::new(HttpJudgeConfig::load(need("config")?)?, images)?),
        _ => bail!("unknown judge `{spec}`"),
    })
}

fn load_or_build_plan(manifest: &DatasetManifest, file: &Option<PathBuf>, args: &PlanArgs) -> Result<PairingPlan> {
    match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(PairingPlan::from_jsonl(&text)?)
        }
        None => args.build(manifest),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { manifest } => {
            let m = load_manifest(&manifest)?;
            let with_mos = m.images.iter().filter(|i| i.mos.is_some()).count();
            println!("{}: {} images, {with_mos} with mos, hash {}", m.name, m.len(), m.content_hash());
        }
        Command::Pair { manifest, plan, out } => {
            let m = load_manifest(&manifest)?;
            let p = plan.build(&m)?;
            emit(&out, &p.to_jsonl())?;
            log::info!("{} pairs", p.len());
        }
        Command::Run(args) => {
            let m = load_manifest(&args.manifest)?;
            let plan = load_or_build_plan(&m, &args.plan_file, &args.plan)?;
            let images = image_root(&args.manifest, &args.images);
            let judge = build_judge(&args.judge, &m, args.plan.seed, &images)?;
            let cfg = SessionConfig {
                rounds: args.plan.rounds,
                seed: args.plan.seed,
                methods: args.agg.methods.clone(),
                max_in_flight: args.max_in_flight,
                output_dir: args.out.clone(),
                aggregate: args.agg.config(),
                max_failure_rate: args.max_failure_rate,
                ..SessionConfig::default()
            };
            let out = session::run_session(&m, &plan, judge.as_ref(), &cfg)?;
            print!("{}", report_table(&out.reports));
            log::info!("outputs written to {}", args.out.display());
        }
        Command::Aggregate { manifest, session: dir, agg, out } => {
            let m = load_manifest(&manifest)?;
            let result = session::reaggregate(&dir, &m, &agg.methods, &agg.config())?;
            let path = out.unwrap_or_else(|| dir.join(session::SCORES_FILE));
            std::fs::write(&path, scores_csv(&result.rankings)).with_context(|| format!("writing {}", path.display()))?;
        }
        Command::Eval { manifest, session: dir, agg, group, out } => {
            let m = load_manifest(&manifest)?;
            let result = session::reaggregate(&dir, &m, &agg.methods, &agg.config())?;
            let reports = match group {
                None => result.reports,
                Some(g) => {
                    let grouping = match g {
                        GroupArg::Dataset => Grouping::Dataset,
                        GroupArg::Pooled => Grouping::Pooled("all".into()),
                        GroupArg::Cells => Grouping::Cells(session::load_plan(&dir)?.cells()),
                    };
                    eval_report(&result.trials, &m, &result.rankings[0], &grouping)?
                }
            };
            let path = out.unwrap_or_else(|| dir.join(session::REPORT_FILE));
            std::fs::write(&path, report_csv(&reports)).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report_table(&reports));
        }
        Command::Simulate { n, mmax, repeats, judge, seed, out } => {
            let judge: SimJudge = judge.parse()?;
            let curve = session::simulate_convergence(n, judge, mmax, repeats, seed, &MapConfig::default())?;
            emit(&out, &curve.to_csv())?;
        }
        Command::Serve { manifest, plan, plan_file, out, port, host, session_id, images, agg } => {
            let m = load_manifest(&manifest)?;
            let p = load_or_build_plan(&m, &plan_file, &plan)?;
            let cfg = SessionConfig {
                seed: plan.seed,
                methods: agg.methods.clone(),
                output_dir: out,
                aggregate: agg.config(),
                ..SessionConfig::default()
            };
            let human = HumanSession::open(session_id.clone(), m, p, cfg, image_root(&manifest, &images))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!(
                    "serving session `{session_id}` on http://{}/api/session/{session_id}/next",
                    listener.local_addr()?
                );
                session::human::serve(listener, human).await
            })?;
        }
        Command::Curate { what } => match what {
            CurateCommand::Attributes { manifest, images, out } => {
                let m = load_manifest(&manifest)?;
                let rows = curation_report(&m, &image_root(&manifest, &images))?;
                emit(&out, &curation_csv(&rows))?;
            }
            CurateCommand::Sample { manifest, k, seed, out } => {
                let m = load_manifest(&manifest)?;
                let sample = uniform_mos_sample(&m, k, seed)?;
                for b in &sample.bands {
                    let flag = if b.shortfall { " (shortfall)" } else { "" };
                    eprintln!("{:<10} {:>5} of {:>5}{flag}", b.band, b.taken, b.candidates);
                }
                sample.manifest.save(&out)?;
            }
            CurateCommand::Bt500 { scores, out } => {
                let text = std::fs::read_to_string(&scores).with_context(|| format!("reading {}", scores.display()))?;
                let data = SubjectScores::from_csv_str(&text)?;
                let r = bt500_screen(&data)?;
                for &s in &r.rejected {
                    eprintln!("rejected {} (P={}, Q={})", data.subjects[s], r.above[s], r.below[s]);
                }
                let mut csv = String::from("condition,mos\n");
                for (c, mos) in data.conditions.iter().zip(&r.mos) {
                    csv.push_str(&format!("{c},{}\n", mos.map(|v| format!("{v:.6}")).unwrap_or_default()));
                }
                emit(&out, &csv)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
