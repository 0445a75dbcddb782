use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use flexrrr::control::{CompensationModel, ControlLawConfig};
use flexrrr::dynamics::{DynamicModel, Integrator, PlantState};
use flexrrr::harness::{
    build_trajectory, compare_models, emit_report, run_case_study, sweep_observer_rate, tip_deflections, EpisodeConfig,
    EpisodeResult, PoseSource, Study, Trajectory, TrajectorySpec, DEFAULT_OBSERVER_RATES,
};
use flexrrr::identification::{collect_snapshots, identify, SnapshotRun};
use flexrrr::kinematics::Mechanism;
use flexrrr::modal::{BoundaryCondition, ModalBasis};
use flexrrr::observer::{
    evaluate, generate_training_set, train, ObserverNet, TrainConfig, TrainingRanges, TrainingSet, INPUT_DIM,
};
use flexrrr::params::{load_params_file, MechanismParams, PlatformPose};
use flexrrr::state::GeneralizedState;
use flexrrr::Error;

const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "flexrrr", version, about = "Planar 3-RRR manipulator with flexible actuation links")]
struct Cli {
    /// Mechanism parameter file (same layout as table1.cfg); built-in
    /// nominal values when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop plant run under constant joint torques.
    Simulate(SimulateArgs),
    /// Snapshot collection, DMD and sparse regression on one link.
    Identify(IdentifyArgs),
    /// Samples observer training and test sets.
    GenData(GenDataArgs),
    /// Trains the pose observer.
    TrainObserver(TrainArgs),
    /// Accuracy and throughput of a trained observer.
    EvalObserver(EvalArgs),
    /// Proposed controller against the joint PD baseline.
    RunCase(EpisodeArgs),
    /// The proposed controller with each compensation model.
    CompareModels(EpisodeArgs),
    /// The proposed controller at several observer rates.
    SweepObserverRate(SweepArgs),
    /// Joint angles for a pose and modal deflection, as CSV.
    Ik(IkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    /// Constant joint torques in N*m.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.0])]
    torque: Vec<f64>,
    /// Starting pose x,y,theta.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.0])]
    pose: Vec<f64>,
    /// Initial tip deflection of every link, metres.
    #[arg(long, default_value_t = 0.0)]
    tip: f64,
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    #[arg(long, default_value_t = 0.0)]
    rotor_inertia: f64,
    /// Log every n-th step.
    #[arg(long, default_value_t = 10)]
    stride: usize,
}

#[derive(Args)]
struct IdentifyArgs {
    /// Flexible link to observe (1, 2 or 3).
    #[arg(long, default_value_t = 1)]
    link: usize,
    #[arg(long, default_value_t = 20.0)]
    duration: f64,
    /// Exit with code 3 unless the first clamped-free mode is selected with
    /// a dominance ratio above 10.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 2_000)]
    test_count: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Exit with code 3 unless the normalized MSE is at most 1e-6 and 10000
    /// predictions take under a second.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Clone)]
struct EpisodeArgs {
    /// Trained observer; the plant's true pose is used when absent.
    #[arg(long)]
    observer: Option<PathBuf>,
    /// Number of waypoints visited, from the start of the default route.
    #[arg(long)]
    legs: Option<usize>,
    #[arg(long, default_value_t = 1000.0)]
    observer_rate: f64,
    /// Std. dev. of noise on measured tip deflection, metres.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Log rows between CSV samples.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Exit with code 3 when the study's qualitative targets are missed.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_OBSERVER_RATES)]
    rates: Vec<f64>,
}

#[derive(Args)]
struct IkArgs {
    /// Pose x,y,theta in metres and radians.
    #[arg(long, required = true, value_delimiter = ',', allow_hyphen_values = true)]
    pose: Vec<f64>,
    /// Clamped-free modal coordinates, link-major; zero when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q_f: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    modes: usize,
}

/// Failure of a subcommand: a library error or a missed check.
enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; help and version succeed
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    let params = match &cli.config {
        Some(path) => load_params_file(path)?,
        None => MechanismParams::table1(),
    };
    params.validate()?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Simulate(a) => simulate(&params, a, out),
        Command::Identify(a) => identify_link(&params, a, out),
        Command::GenData(a) => gen_data(&params, a, cli.seed, out),
        Command::TrainObserver(a) => train_observer(a, cli.seed, out),
        Command::EvalObserver(a) => eval_observer(a, out),
        Command::RunCase(a) => run_case(&params, a, cli.seed, out),
        Command::CompareModels(a) => run_compare(&params, a, cli.seed, out),
        Command::SweepObserverRate(a) => run_sweep(&params, a, cli.seed, out),
        Command::Ik(a) => ik(&params, a),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })
}

fn write(path: &Path, body: &str) -> Result<(), Error> {
    std::fs::write(path, body).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn triple(name: &str, v: &[f64]) -> Result<[f64; 3], Error> {
    <[f64; 3]>::try_from(v)
        .map_err(|_| Error::Validation(format!("--{name} takes three comma-separated values, got {}", v.len())))
}

fn check(ok: bool, msg: String) -> CliResult {
    println!("{} {msg}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Failure::Check(msg))
    }
}

fn simulate(params: &MechanismParams, a: &SimulateArgs, out: &Path) -> CliResult {
    if !(a.duration >= 0.0 && a.dt > 0.0) {
        return Err(Error::Validation("duration >= 0 and dt > 0".into()).into());
    }
    let basis = ModalBasis::clamped_free(params, a.modes)?;
    let tip_unit = basis.tip_values();
    let mech = Mechanism::new(params.clone(), basis.clone());
    let model = DynamicModel::new(mech).with_rotor_inertia(a.rotor_inertia).with_damping_ratio(a.damping);
    let tau = triple("torque", &a.torque)?;
    let mut x = GeneralizedState::at_rest(PlatformPose::from_slice(&triple("pose", &a.pose)?), a.modes);
    if a.modes > 0 {
        for link in 0..3 {
            x.q[3 + link * a.modes] = a.tip / tip_unit[0];
        }
    }
    let mut plant = PlantState::new(x);
    let steps = (a.duration / a.dt).round() as usize;
    let mut csv = String::from("t,x,y,theta,tip1,tip2,tip3,energy\n");
    let mut row = |t: f64, st: &GeneralizedState| -> Result<(), Error> {
        let p = st.pose();
        let w = tip_deflections(&basis, st);
        let e = model.energy(st)?;
        csv.push_str(&format!(
            "{t:.6},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{e:.12e}\n",
            p.x, p.y, p.theta, w[0], w[1], w[2]
        ));
        Ok(())
    };
    row(0.0, &plant.x)?;
    for k in 1..=steps {
        model.step(&mut plant, &tau, a.dt, Integrator::Rk4)?;
        if k % a.stride.max(1) == 0 || k == steps {
            row(k as f64 * a.dt, &plant.x)?;
        }
    }
    create_dir(out)?;
    write(&out.join("simulate.csv"), &csv)?;
    Ok(())
}

fn identify_link(params: &MechanismParams, a: &IdentifyArgs, out: &Path) -> CliResult {
    let run = SnapshotRun { duration: a.duration, ..SnapshotRun::default() };
    let started = Instant::now();
    let snapshots = collect_snapshots(params, &run, a.link)?;
    let report = identify(&snapshots, params.l1)?;
    info!("identification finished in {:.1} s", started.elapsed().as_secs_f64());
    create_dir(out)?;
    snapshots.write_csv(&out.join("snapshots.csv"))?;
    let text = report.to_text();
    write(&out.join("identification.txt"), &text)?;
    print!("{text}");
    if a.check {
        let ratio = report.sindy.dominance_ratio();
        check(
            report.selected == Some((BoundaryCondition::ClampedFree, 1)) && ratio > 10.0,
            format!("selected {:?}, dominance ratio {ratio:.1}", report.selected),
        )?;
    }
    Ok(())
}

fn gen_data(params: &MechanismParams, a: &GenDataArgs, seed: u64, out: &Path) -> CliResult {
    let ranges = TrainingRanges::default();
    let train_set = generate_training_set(params, &ranges, a.count, seed)?;
    let test_set = generate_training_set(params, &ranges, a.test_count, seed.wrapping_add(1))?;
    create_dir(out)?;
    train_set.write_csv(&out.join("train.csv"))?;
    test_set.write_csv(&out.join("test.csv"))?;
    println!(
        "train {} rows ({}), test {} rows ({})",
        train_set.len(),
        train_set.content_hash(),
        test_set.len(),
        test_set.content_hash()
    );
    Ok(())
}

fn train_observer(a: &TrainArgs, seed: u64, out: &Path) -> CliResult {
    let train_set = TrainingSet::read_csv(&a.train.clone().unwrap_or_else(|| out.join("train.csv")))?;
    let test_set = TrainingSet::read_csv(&a.test.clone().unwrap_or_else(|| out.join("test.csv")))?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        seed,
        time_budget: a.budget.map(std::time::Duration::from_secs_f64),
        ..defaults
    };
    let mut net = ObserverNet::new(seed);
    let report = train(&mut net, &train_set, &test_set, &cfg)?;
    create_dir(out)?;
    net.save(&out.join("observer.json"))?;
    info!("wrote {}", out.join("observer.json").display());
    let mut history = String::from("epoch,train_mse,test_mse,best_test_mse\n");
    for r in &report.history {
        history.push_str(&format!("{},{:.6e},{:.6e},{:.6e}\n", r.epoch, r.train_mse, r.test_mse, r.best_test_mse));
    }
    write(&out.join("training_history.csv"), &history)?;
    println!(
        "best normalized test MSE {:.3e} after {} epochs in {:.1} s",
        report.best_test_mse,
        report.history.len(),
        report.elapsed.as_secs_f64()
    );
    Ok(())
}

fn eval_observer(a: &EvalArgs, out: &Path) -> CliResult {
    let net = ObserverNet::load(&a.model.clone().unwrap_or_else(|| out.join("observer.json")))?;
    let data = TrainingSet::read_csv(&a.data.clone().unwrap_or_else(|| out.join("test.csv")))?;
    let report = evaluate(&net, &data);
    let n = 10_000;
    let started = Instant::now();
    let mut sink = 0.0;
    for k in 0..n {
        let input: [f64; INPUT_DIM] = data.input(k % data.len().max(1));
        sink += net.predict_pose(&input).x;
    }
    let elapsed = started.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    println!(
        "samples {}  normalized MSE {:.3e}  RMSE x {:.3e} m  y {:.3e} m  theta {:.3e} rad  max |err| x {:.3e} m  y {:.3e} m  theta {:.3e} rad",
        report.samples,
        report.normalized_mse,
        report.rmse[0],
        report.rmse[1],
        report.rmse[2],
        report.max_abs_error[0],
        report.max_abs_error[1],
        report.max_abs_error[2]
    );
    println!("{n} single predictions in {elapsed:.3} s");
    if a.check {
        check(
            report.normalized_mse <= 1e-6 && elapsed < 1.0,
            format!("normalized MSE {:.3e}, {n} predictions in {elapsed:.3} s", report.normalized_mse),
        )?;
    }
    Ok(())
}

fn trajectory(params: &MechanismParams, legs: Option<usize>) -> Result<Trajectory, Error> {
    let mut spec = TrajectorySpec::default();
    if let Some(n) = legs {
        if n == 0 || n > spec.waypoints.len() {
            return Err(Error::Validation(format!("legs must lie in 1..={}", spec.waypoints.len())));
        }
        spec.waypoints.truncate(n);
    }
    build_trajectory(spec, params)
}

fn episode_config(a: &EpisodeArgs, seed: u64) -> Result<EpisodeConfig, Error> {
    let mut cfg = EpisodeConfig::new(ControlLawConfig { observer_rate: a.observer_rate, ..ControlLawConfig::proposed() });
    cfg.seed = seed;
    cfg.noise_std = a.noise;
    if let Some(path) = &a.observer {
        cfg.pose_source = PoseSource::Network(Arc::new(ObserverNet::load(path)?));
    }
    Ok(cfg)
}

fn report(out: &Path, study: &Study, stride: usize, runs: &[(String, &EpisodeResult)]) -> Result<(), Error> {
    emit_report(out, study, stride)?;
    for (label, r) in runs {
        write(&out.join(format!("episode_{label}.csv")), &r.log_csv())?;
    }
    print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
    Ok(())
}

fn run_case(params: &MechanismParams, a: &EpisodeArgs, seed: u64, out: &Path) -> CliResult {
    let traj = trajectory(params, a.legs)?;
    let runs = run_case_study(params, &episode_config(a, seed)?, &traj)?;
    let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(l, r)| (l.clone(), r)).collect();
    report(out, &Study::CaseStudy(runs.clone()), a.stride, &labelled)?;
    if a.check {
        let (prop, pd) = (&runs[0].1, &runs[1].1);
        let pose = prop.metrics.dwell_position_mae() / pd.metrics.dwell_position_mae();
        let deform = prop.metrics.dwell_deformation() / pd.metrics.dwell_deformation();
        let (ep, eb) = (prop.metrics.total_energy(), pd.metrics.total_energy());
        check(
            prop.completed() && pd.completed() && pose <= 0.2 && deform <= 0.2 && ep <= eb,
            format!("dwell pose MAE ratio {pose:.3}, dwell deformation ratio {deform:.3}, energy {ep:.4} J vs {eb:.4} J"),
        )?;
    }
    Ok(())
}

fn run_compare(params: &MechanismParams, a: &EpisodeArgs, seed: u64, out: &Path) -> CliResult {
    let traj = trajectory(params, a.legs)?;
    let runs = compare_models(params, &episode_config(a, seed)?, &traj, &CompensationModel::ALL)?;
    let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(m, r)| (m.name().to_string(), r)).collect();
    report(out, &Study::ModelComparison(runs.clone()), a.stride, &labelled)?;
    if a.check {
        let deform = |m: CompensationModel| {
            runs.iter().find(|(v, _)| *v == m).map_or(f64::INFINITY, |(_, r)| r.metrics.dwell_deformation())
        };
        let developed = deform(CompensationModel::Developed);
        let rigid = developed / deform(CompensationModel::Rigid);
        let pinned = developed / deform(CompensationModel::ClampedPinned);
        check(
            rigid <= 0.3 && pinned <= 0.3,
            format!("developed dwell deformation {developed:.3e} m, ratio to rigid {rigid:.3}, to clamped-pinned {pinned:.3}"),
        )?;
    }
    Ok(())
}

fn run_sweep(params: &MechanismParams, a: &SweepArgs, seed: u64, out: &Path) -> CliResult {
    let traj = trajectory(params, a.episode.legs)?;
    let mut rates = a.rates.clone();
    rates.sort_by(|x, y| y.total_cmp(x));
    let runs = sweep_observer_rate(params, &episode_config(&a.episode, seed)?, &traj, &rates)?;
    let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(f, r)| (format!("{f}hz"), r)).collect();
    report(out, &Study::RateSweep(runs.clone()), a.episode.stride, &labelled)?;
    if a.episode.check {
        let mae: Vec<f64> =
            runs.iter().map(|(_, r)| if r.completed() { r.metrics.position_mae() } else { f64::INFINITY }).collect();
        let stable = runs.iter().filter(|(f, _)| *f >= 200.0).all(|(_, r)| r.completed() && r.metrics.dwell_lyapunov_ratio < 1.0);
        let mut inversions = 0;
        let mut large = false;
        for w in mae.windows(2) {
            if w[1] < w[0] {
                inversions += 1;
                large |= w[1] < 0.95 * w[0];
            }
        }
        check(
            stable && inversions <= 1 && !large,
            format!(
                "stable at >= 200 Hz: {stable}; pose MAE by rate [{}]; inversions {inversions}",
                mae.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
            ),
        )?;
    }
    Ok(())
}

fn ik(params: &MechanismParams, a: &IkArgs) -> CliResult {
    let q_f = if a.q_f.is_empty() { vec![0.0; 3 * a.modes] } else { a.q_f.clone() };
    if q_f.len() != 3 * a.modes {
        return Err(Error::Dimension { expected: 3 * a.modes, got: q_f.len() }.into());
    }
    let mech = Mechanism::new(params.clone(), ModalBasis::clamped_free(params, a.modes)?);
    let sol = mech.inverse_kinematics(&PlatformPose::from_slice(&triple("pose", &a.pose)?), &q_f)?;
    println!("q_a1,q_a2,q_a3,q_p1,q_p2,q_p3");
    println!("{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}", sol.q_a[0], sol.q_a[1], sol.q_a[2], sol.q_p[0], sol.q_p[1], sol.q_p[2]);
    Ok(())
}
