//! `seer`: generate intention datasets, train and evaluate recurrent classifiers, run the
//! scripted live demos and serve telemetry.
//!
//! Exit codes: 0 ok, 2 usage or config, 3 data, 4 runtime.

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use seer_core::config::ScenarioConfig;
use seer_core::dataset::{read_all, DatasetWriter, FeatureVariant, Split};
use seer_core::demo::{run_demo, Scenario};
use seer_core::eval::{clean, evaluate, Report, ReportBlock};
use seer_core::generate::generate;
use seer_core::infer::{InferenceEngine, Observation, TickInput};
use seer_core::planner::{IntentionLabel, Scene};
use seer_core::rnn::{self, load_model, save_model, CellKind};
use seer_core::stream::{apply_control, FrameMessage, Server, ServerConfig};
use seer_core::world::{World, WorldConfig};
use seer_core::Error;

#[derive(Parser, Debug)]
#[command(name = "seer", version, about = "Driving-intention simulation, training, evaluation and live inference")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate traffic and record a labelled sequence dataset.
    Generate,
    /// Train a classifier on the train split of a dataset.
    Train,
    /// Per-timestep precision and recall of a model on the test split.
    Eval {
        /// Print the JSON report to stdout as well.
        #[arg(long)]
        json: bool,
    },
    /// Scripted lane-change and conflict runs with live predictions and SVG frames.
    Demo {
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
    },
    /// Run the world and stream frames over TCP.
    Serve {
        /// Annotate frames with predictions from the model file.
        #[arg(long)]
        predict: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    LaneChange,
    Conflict,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SceneArg {
    Highway,
    Urban,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    A2,
    A3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CellArg {
    Lstm,
    Gru,
}

/// Flags override the config file.
#[derive(Args, Debug)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Resets world settings to the scene's defaults before other flags apply.
    #[arg(long, global = true, value_enum)]
    scene: Option<SceneArg>,
    #[arg(long = "num_lane_right", global = true)]
    num_lane_right: Option<usize>,
    #[arg(long = "num_lane_left", global = true)]
    num_lane_left: Option<usize>,
    #[arg(long = "lane_width", global = true)]
    lane_width: Option<f64>,
    #[arg(long = "road_length", global = true)]
    road_length: Option<f64>,
    /// Readout period in units of 10 ms.
    #[arg(long = "log_frequency", global = true)]
    log_frequency: Option<u64>,
    #[arg(long, global = true)]
    traction: Option<f64>,
    #[arg(long = "forward_slip_limit", global = true)]
    forward_slip_limit: Option<f64>,
    #[arg(long = "sideway_slip_limit", global = true)]
    sideway_slip_limit: Option<f64>,
    #[arg(long = "num_agents", global = true)]
    num_agents: Option<usize>,
    /// Seed for training data, model initialisation and the served world.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "test_seed", global = true)]
    test_seed: Option<u64>,
    /// Frames per sequence: 6 or 12.
    #[arg(long = "seq_len", global = true)]
    seq_len: Option<usize>,
    #[arg(long = "train_sequences", global = true)]
    train_sequences: Option<u64>,
    #[arg(long = "test_sequences", global = true)]
    test_sequences: Option<u64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    cell: Option<CellArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// JSON report output of `eval`.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Output directory of `demo`.
    #[arg(long = "out_dir", global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    snapshots: Option<usize>,
    #[arg(long = "log_port", global = true)]
    log_port: Option<u16>,
    #[arg(long = "control_port", global = true)]
    control_port: Option<u16>,
    /// Frames to serve; 0 runs until interrupted.
    #[arg(long, global = true)]
    frames: Option<u64>,
    /// Serve as fast as possible instead of at the readout rate.
    #[arg(long, global = true)]
    batchmode: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Data(_) | Error::Shape(_) | Error::Protocol { .. } | Error::OutOfBounds(_) => 3,
            _ => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_error(field: &str, reason: impl Into<String>) -> Failure {
    Failure::from(Error::config(field, reason))
}

impl Common {
    fn effective(&self) -> CliResult<ScenarioConfig> {
        let mut c = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.scene {
            c.generate.world = WorldConfig::for_scene(match s {
                SceneArg::Highway => Scene::Highway,
                SceneArg::Urban => Scene::Urban,
            });
        }
        let w = &mut c.generate.world;
        set(&mut w.road.num_lanes_right, self.num_lane_right);
        set(&mut w.road.num_lanes_left, self.num_lane_left);
        set(&mut w.road.lane_width, self.lane_width);
        set(&mut w.road.road_length, self.road_length);
        set(&mut w.log_frequency, self.log_frequency);
        set(&mut w.physics.traction, self.traction);
        set(&mut w.physics.forward_slip_limit, self.forward_slip_limit);
        set(&mut w.physics.sideway_slip_limit, self.sideway_slip_limit);
        set(&mut w.num_agents, self.num_agents);
        if let Some(seed) = self.seed {
            c.generate.train_seed = seed;
            c.rnn.seed = seed;
        }
        set(&mut c.generate.test_seed, self.test_seed);
        set(&mut c.generate.seq_len, self.seq_len);
        set(&mut c.generate.train_sequences, self.train_sequences);
        set(&mut c.generate.test_sequences, self.test_sequences);
        if let Some(v) = self.variant {
            c.variant = match v {
                VariantArg::A2 => FeatureVariant::A2,
                VariantArg::A3 => FeatureVariant::A3,
            };
        }
        if let Some(cell) = self.cell {
            c.rnn.cell = match cell {
                CellArg::Lstm => CellKind::Lstm,
                CellArg::Gru => CellKind::Gru,
            };
        }
        set(&mut c.rnn.epochs, self.epochs);
        set(&mut c.paths.dataset, self.dataset.clone());
        set(&mut c.paths.model, self.model.clone());
        if self.report.is_some() {
            c.paths.report = self.report.clone();
        }
        set(&mut c.paths.out_dir, self.out_dir.clone());
        set(&mut c.demo.snapshots, self.snapshots);
        set(&mut c.serve.log_port, self.log_port);
        if self.control_port.is_some() {
            c.serve.control_port = self.control_port;
        }
        set(&mut c.serve.frames, self.frames);
        c.serve.batchmode |= self.batchmode;
        c.sync();
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Accepts the single-dash spelling of `-batchmode`.
fn normalise_args(args: impl Iterator<Item = String>) -> Vec<String> {
    args.map(|a| if a == "-batchmode" { "--batchmode".to_string() } else { a }).collect()
}

fn require_file(field: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(field, format!("{} does not exist", path.display())))
    }
}

fn cmd_generate(cfg: &ScenarioConfig) -> CliResult<()> {
    let g = &cfg.generate;
    let mut writer = DatasetWriter::create(&cfg.paths.dataset, g.manifest())?;
    let started = Instant::now();
    let stats = generate(g, &mut writer)?;
    let manifest = writer.finish()?;
    println!(
        "wrote {} ({} sequences, T={}, {} ms period, {:?} features) in {:.1} s",
        cfg.paths.dataset.display(),
        manifest.total(),
        manifest.seq_len,
        manifest.frame_period_ms,
        manifest.feature_variant,
        started.elapsed().as_secs_f64()
    );
    println!("{:<8} {:>10} {:>10}", "split", "sequences", "clean");
    println!("{:<8} {:>10} {:>10}", "train", stats.train.sequences, stats.train.clean_sequences);
    println!("{:<8} {:>10} {:>10}", "test", stats.test.sequences, stats.test.clean_sequences);
    println!("{:<3} {:<18} {:>10}", "id", "raw label", "frames");
    for l in IntentionLabel::ALL {
        println!("{:<3} {:<18} {:>10}", l.index(), l.name(), manifest.label_frame_counts[l.index()]);
    }
    Ok(())
}

fn load_split(
    cfg: &ScenarioConfig,
    split: Split,
) -> CliResult<(seer_core::dataset::DatasetManifest, Vec<seer_core::dataset::SequenceRecord>)> {
    require_file("dataset", &cfg.paths.dataset)?;
    let (manifest, records) = read_all(&cfg.paths.dataset)?;
    let records: Vec<_> = clean(&records).into_iter().filter(|r| r.split == split).collect();
    Ok((manifest, records))
}

fn cmd_train(cfg: &ScenarioConfig) -> CliResult<()> {
    let (manifest, records) = load_split(cfg, Split::Train)?;
    if cfg.variant.dim() > manifest.feature_variant.dim() {
        return Err(config_error(
            "variant",
            format!("training wants {:?} features, dataset provides {:?}", cfg.variant, manifest.feature_variant),
        ));
    }
    let mut rnn_cfg = cfg.rnn.clone();
    rnn_cfg.seq_len = manifest.seq_len;
    let view: Vec<_> = records.iter().map(|r| r.project(cfg.variant)).collect::<Result<_, _>>()?;
    println!("training {} {:?} T={} on {} clean sequences", rnn_cfg.cell.name(), cfg.variant, rnn_cfg.seq_len, view.len());
    let started = Instant::now();
    let (model, log) = rnn::train(&view, &rnn_cfg)?;
    println!("{:>5} {:>10} {:>10}", "epoch", "loss", "accuracy");
    for e in &log.epochs {
        println!("{:>5} {:>10.5} {:>9.2}%", e.epoch, e.loss, 100.0 * e.accuracy);
    }
    save_model(&model, &cfg.paths.model)?;
    let log_path = with_suffix(&cfg.paths.model, ".log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&log).expect("log serialises"))?;
    println!("wrote {} and {} in {:.1} s", cfg.paths.model.display(), log_path.display(), started.elapsed().as_secs_f64());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_eval(cfg: &ScenarioConfig, json: bool) -> CliResult<()> {
    require_file("model", &cfg.paths.model)?;
    let model = load_model(&cfg.paths.model)?;
    let (manifest, records) = load_split(cfg, Split::Test)?;
    let want = FeatureVariant::from_dim(model.config.input_dim)
        .ok_or_else(|| config_error("model", format!("input dim {} is not a feature variant", model.config.input_dim)))?;
    if want.dim() > manifest.feature_variant.dim() {
        return Err(config_error("variant", format!("model expects {want:?} features, dataset provides {:?}", manifest.feature_variant)));
    }
    if model.config.seq_len != manifest.seq_len {
        return Err(config_error("seq_len", format!("model uses T={}, dataset has T={}", model.config.seq_len, manifest.seq_len)));
    }
    let ev = evaluate(&model, &records)?;
    let block = ReportBlock {
        cell: model.config.cell,
        variant: want,
        seq_len: model.config.seq_len,
        scene: manifest.scene,
        train_sequences: manifest.counts.get(&Split::Train).copied().unwrap_or(0) as usize,
        test_sequences: records.len(),
        final_train_accuracy: None,
        accuracy: ev.matrix.accuracy(),
        matrix: ev.matrix,
        metrics: ev.metrics,
    };
    let report = Report { blocks: vec![block] };
    print!("{}", report.render(false));
    println!("three-class view");
    print!("{}", report.render(true));
    if let Some(p) = &cfg.paths.report {
        fs::write(p, report.to_json())?;
        println!("wrote {}", p.display());
    }
    if json {
        println!("{}", report.to_json());
    }
    Ok(())
}

fn cmd_demo(cfg: &ScenarioConfig, only: Option<ScenarioArg>) -> CliResult<()> {
    require_file("model", &cfg.paths.model)?;
    let model = Arc::new(load_model(&cfg.paths.model)?);
    let scenarios = match only {
        Some(ScenarioArg::LaneChange) => vec![Scenario::LaneChange],
        Some(ScenarioArg::Conflict) => vec![Scenario::Conflict],
        None => cfg.demo.scenarios.clone(),
    };
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let demo_cfg = cfg.demo_config();
    let period = cfg.generate.world.frame_period_ms();
    for sc in scenarios {
        let run = run_demo(model.clone(), sc, &demo_cfg)?;
        let name = match sc {
            Scenario::LaneChange => "lane_change",
            Scenario::Conflict => "conflict",
        };
        let log = cfg.paths.out_dir.join(format!("{name}.ndjson"));
        fs::write(&log, run.log_ndjson())?;
        for (k, svg) in run.svgs.iter().enumerate() {
            fs::write(cfg.paths.out_dir.join(format!("{name}_{k:03}.svg")), svg)?;
        }
        let latency = run.ticks.iter().map(|t| t.result.latency_us).sum::<u64>() as f64 / run.ticks.len().max(1) as f64;
        println!("{name}: onset at {:.1} s", run.onset_ms as f64 / 1000.0);
        println!("  vote before onset    {}", run.vote_before_onset().map(|l| l.name()).unwrap_or("none"));
        match run.transition() {
            Some((t, l)) => println!("  first vote change    {} after {} ticks", l.name(), (t - run.onset_ms) / period),
            None => println!("  first vote change    none"),
        }
        match run.manoeuvre_s() {
            Some(s) => println!("  manoeuvre completed  {s:.1} s"),
            None => println!("  manoeuvre completed  not within the run"),
        }
        println!("  risk flags           {}", run.flag_count());
        println!("  mean tick latency    {:.0} us", latency);
        println!("  wrote {} and {} SVG frames", log.display(), run.svgs.len());
    }
    Ok(())
}

fn cmd_serve(cfg: &ScenarioConfig, predict: bool) -> CliResult<()> {
    let s = &cfg.serve;
    let mut engine = if predict {
        require_file("model", &cfg.paths.model)?;
        let model = Arc::new(load_model(&cfg.paths.model)?);
        let w = &cfg.generate.world;
        Some(InferenceEngine::new(model, w.road, w.planner, cfg.infer)?)
    } else {
        None
    };
    // Probe first so an unavailable port is a config error, not a runtime one.
    for (field, port) in [("log_port", Some(s.log_port)), ("control_port", s.control_port)] {
        if let Some(p) = port.filter(|&p| p != 0) {
            TcpListener::bind((s.host.as_str(), p)).map_err(|e| config_error(field, format!("cannot bind {}:{p}: {e}", s.host)))?;
        }
    }
    let server = Server::bind((s.host.as_str(), s.log_port), ServerConfig { backlog_cap: s.backlog_cap })?;
    let control = match s.control_port {
        Some(p) => Some(Server::bind((s.host.as_str(), p), ServerConfig { backlog_cap: s.backlog_cap })?),
        None => None,
    };
    println!("log_port {}", server.local_addr());
    if let Some(c) = &control {
        println!("control_port {}", c.local_addr());
    }
    std::io::stdout().flush()?;

    let mut world = World::new(cfg.generate.world.clone(), cfg.generate.train_seed)?;
    let period = Duration::from_millis(world.config().frame_period_ms());
    let mut paused = false;
    let mut tick = 0u64;
    let mut next = Instant::now();
    while s.frames == 0 || tick < s.frames {
        for srv in std::iter::once(&server).chain(control.as_ref()) {
            while let Some(inbound) = srv.try_control() {
                match apply_control(&mut world, &inbound.message, paused) {
                    Ok(p) => paused = p,
                    Err(e) => log::warn!("control from connection {}: {e}", inbound.connection),
                }
            }
        }
        if !paused {
            world.advance_frame()?;
            let mut msg = FrameMessage::from_world(&world, tick);
            if let Some(engine) = engine.as_mut() {
                let obs = world.agents().iter().map(|a| Observation { agent: a.id, state: a.state }).collect();
                let result = engine.process(&TickInput { tick, time_ms: world.time_ms(), observations: obs })?;
                msg.annotate(&result);
            }
            server.publish(&msg);
            tick += 1;
        }
        if !s.batchmode || paused {
            next += period;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }
    let st = server.stats();
    println!(
        "published {} frames to {} subscribers ({} dropped as slow, max backlog {})",
        st.published, st.accepted, st.disconnected_slow, st.max_backlog
    );
    if let Some(e) = engine {
        if let Some(mean) = e.latency().mean() {
            println!("mean inference latency {:.2} ms", mean.as_secs_f64() * 1000.0);
        }
    }
    server.shutdown();
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = cli.common.effective()?;
    if cli.common.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match cli.cmd {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { json } => cmd_eval(&cfg, json),
        Command::Demo { scenario } => cmd_demo(&cfg, scenario),
        Command::Serve { predict } => cmd_serve(&cfg, predict),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(normalise_args(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.code)
        }
    }
}
