use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use telehaptic::bench::{run_bench, BenchConfig, BenchResult};
use telehaptic::channel::DelayModel;
use telehaptic::formats::{self, GridFile, PathFile, StatRecord};
use telehaptic::scenario::{self, run_scenario, ScenarioConfig};
use telehaptic::serve::serve;
use telehaptic_core::camera::CameraIntrinsics;
use telehaptic_core::geometry::{Vec2, Vec3};
use telehaptic_core::plan::{build_occupancy, rrt_plan, GridSpec, RrtParams};
use telehaptic_core::segment::{evaluate, region_grow, seed_from_mark, RegionParams};
use telehaptic_core::sim::{scripted_run, Script};
use telehaptic_core::tsdf::{GroundPlane, TsdfParams, TsdfVolume};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "telehaptic", version, about = "Haptic teleoperation toolkit: fusion, haptics, segmentation, planning and scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a recorded session (or a scripted run of a scene) into a TSDF dump and PLY cloud.
    Fuse(FuseArgs),
    /// Drive a scripted HIP path over the corner scene and write traces and timings.
    HapticBench(BenchArgs),
    /// Grow a region from a marked point and write the label PNG.
    Segment(SegmentArgs),
    /// Plan a path on an occupancy grid.
    Plan(PlanArgs),
    /// Run scenarios and write their metrics bundles.
    Simulate(SimArgs),
    /// Serve a live session over WebSocket.
    Serve(ServeArgs),
}

#[derive(Args)]
struct FuseArgs {
    /// Session file of concatenated frame messages.
    #[arg(long)]
    session: Option<PathBuf>,
    /// Scene JSON to render instead of a session; needs --script.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Velocity script JSON for --scene.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Volume resolution; repeat for several.
    #[arg(long, default_values_t = [128])]
    resolution: Vec<usize>,
    #[arg(long, default_value_t = 0.002)]
    step: f64,
    #[arg(long, default_value_t = 0.7)]
    end_x: f64,
    #[arg(long, default_value_t = 0.3)]
    friction: f64,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    session: PathBuf,
    /// Frame index within the session.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// World point `x,y,z` to seed from.
    #[arg(long, value_delimiter = ',', num_args = 3, conflicts_with = "pixel")]
    mark: Option<Vec<f64>>,
    /// Seed pixel `u,v`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pixel: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 10.0)]
    grid_interval: f64,
    #[arg(long, default_value_t = 20.0)]
    threshold: f64,
    /// Ground-truth label PNG; enables metrics.csv.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Grid JSON.
    #[arg(long, conflicts_with = "volume")]
    grid: Option<PathBuf>,
    /// TSDF dump to build the grid from, floor at --ground-z.
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    ground_z: f64,
    #[arg(long, default_value_t = 0.05)]
    cell_size: f64,
    #[arg(long, default_value_t = 0.45)]
    inflation: f64,
    #[arg(long, value_delimiter = ',', num_args = 2, required = true)]
    start: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, required = true)]
    goal: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    resolution: Option<usize>,
    /// Fixed round trip in ms, split evenly between the two directions.
    #[arg(long, conflicts_with = "delay_ramp")]
    delay_ms: Option<f64>,
    /// Round trip ramp `FROM:TO:SECONDS`, split evenly between the two directions.
    #[arg(long)]
    delay_ramp: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    /// Scene JSON replacing the config's scene.
    #[arg(long)]
    scene: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) -> AnyResult<()> {
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        if let Some(ms) = self.delay_ms {
            let m = DelayModel::Fixed { ms: ms / 2.0 };
            m.validate()?;
            (cfg.uplink, cfg.downlink) = (m, m);
        }
        if let Some(spec) = &self.delay_ramp {
            let m = DelayModel::parse(spec)?.scaled(0.5);
            (cfg.uplink, cfg.downlink) = (m, m);
        }
        cfg.uplink = cfg.uplink.with_env_override()?;
        cfg.downlink = cfg.downlink.with_env_override()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if let Some(p) = &self.scene {
            cfg.scene = formats::read_scene(p)?;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct SimArgs {
    /// Scenario config JSON; repeat for several.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Built-in suite when no config is given: default, latency or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fuse(a) => fuse(a),
        Command::HapticBench(a) => bench(a),
        Command::Segment(a) => segment(a),
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn create(dir: &Path, name: &str) -> AnyResult<File> {
    std::fs::create_dir_all(dir)?;
    Ok(File::create(dir.join(name))?)
}

fn fuse(a: FuseArgs) -> AnyResult<bool> {
    let log = match (&a.session, &a.scene, &a.script) {
        (Some(s), _, _) => formats::read_session(s)?,
        (None, Some(scene), Some(script)) => {
            let scene = formats::read_scene(scene)?;
            let script: Script = formats::read_json(script)?;
            let log = scripted_run(&scene, &script, &CameraIntrinsics::default())?;
            std::fs::create_dir_all(&a.out)?;
            formats::write_session(&log, &a.out.join("session.bin"))?;
            log
        }
        _ => return Err("need --session, or --scene with --script".into()),
    };
    let first = log.frames.first().ok_or("session has no frames")?;
    let mut params = TsdfParams::with_resolution(a.resolution);
    if let Some(v) = a.voxel_size {
        params.voxel_size = v;
    }
    let intr = CameraIntrinsics::default();
    let mut vol = TsdfVolume::placed_for_camera(params, &first.pose)?;
    for f in &log.frames {
        vol.integrate_frame(f, &intr)?;
    }
    formats::write_tsdf(&vol, create(&a.out, "volume.tsdf")?)?;
    let pts = vol.surface_points(vol.voxel_size());
    formats::write_ply(&pts, create(&a.out, "cloud.ply")?)?;
    println!("fused {} frames into {}^3, {} surface points", log.frames.len(), a.resolution, pts.len());
    Ok(true)
}

fn bench_records(r: &BenchResult, step: f64) -> Vec<StatRecord> {
    let s = |n: &str, v: f64| StatRecord::scalar(&format!("{n}_{}", r.resolution), v);
    vec![
        s("mean_update_ms", r.mean_update_ms),
        s("max_update_ms", r.max_update_ms),
        s("fuse_ms", r.fuse_ms),
        s("raycast_ms", r.raycast_ms),
        s("cloud_points", r.cloud_points as f64),
        s("max_step_shaded", r.max_step_shaded()),
        s("max_step_frictionless", r.max_step_frictionless()),
        s("max_step_naive", r.max_step_naive()),
        s("naive_jumps", r.naive_jumps(step, 10.0) as f64),
    ]
}

fn bench(a: BenchArgs) -> AnyResult<bool> {
    let mut timings = Vec::new();
    let mut ok = true;
    for &res in &a.resolution {
        let cfg = BenchConfig {
            resolution: res,
            step: a.step,
            end_x: a.end_x,
            friction: a.friction,
            frames: a.frames,
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg)?;
        let dir = a.out.join(format!("res{res}"));
        formats::write_trace(&r.shaded, create(&dir, "haptic_trace.csv")?)?;
        formats::write_trace(&r.naive, create(&dir, "naive_trace.csv")?)?;
        formats::write_trace(&r.frictionless, create(&dir, "frictionless_trace.csv")?)?;
        let bound = a.step + r.voxel_size;
        let smooth = r.max_step_shaded() <= bound;
        ok &= smooth;
        println!(
            "res {res}: update {:.4} ms mean / {:.4} ms max, shaded step {:.4} (bound {bound:.4}), naive jumps {}",
            r.mean_update_ms,
            r.max_update_ms,
            r.max_step_shaded(),
            r.naive_jumps(a.step, 10.0)
        );
        timings.extend(bench_records(&r, a.step));
    }
    formats::write_csv(&timings, create(&a.out, "timing.csv")?)?;
    Ok(ok)
}

fn segment(a: SegmentArgs) -> AnyResult<bool> {
    let log = formats::read_session(&a.session)?;
    let frame = log.frames.get(a.frame).ok_or("frame index out of range")?;
    let intr = CameraIntrinsics::default();
    let seed = match (&a.mark, &a.pixel) {
        (Some(m), _) => seed_from_mark(&Vec3::new(m[0], m[1], m[2]), &frame.pose, &intr)?,
        (None, Some(p)) => (p[0], p[1]),
        _ => return Err("need --mark or --pixel".into()),
    };
    let params = RegionParams {
        compactness: a.compactness,
        grid_interval: a.grid_interval,
        threshold: a.threshold,
        ..RegionParams::default()
    };
    let (labels, stats) = region_grow(frame, &intr, seed, &params, 1)?;
    formats::write_label_png(&labels, create(&a.out, "labels.png")?)?;
    println!("grew {} pixels from {:?}", stats.count, seed);
    if let Some(t) = &a.truth {
        let truth = formats::read_label_png(BufReader::new(File::open(t)?))?;
        let m = evaluate(&labels, &truth)?;
        let rows = vec![
            StatRecord::scalar("pri", m.pri),
            StatRecord::scalar("bde", m.bde),
            StatRecord::scalar("gce", m.gce),
        ];
        formats::write_csv(&rows, create(&a.out, "metrics.csv")?)?;
        println!("PRI {:.5} BDE {:.3} GCE {:.5}", m.pri, m.bde, m.gce);
    }
    Ok(true)
}

fn plan(a: PlanArgs) -> AnyResult<bool> {
    let grid = match (&a.grid, &a.volume) {
        (Some(g), _) => formats::read_json::<GridFile>(g)?.to_grid()?,
        (None, Some(v)) => {
            let vol = formats::read_tsdf(BufReader::new(File::open(v)?))?;
            let c = vol.bounds().center();
            let cells = (vol.params().extent() / a.cell_size).ceil() as usize;
            let spec = GridSpec::centered(Vec2::new(c.x, c.y), cells, a.cell_size, a.inflation);
            let g = build_occupancy(&vol, Some(&GroundPlane::horizontal(a.ground_z)), &[], spec)?;
            std::fs::create_dir_all(&a.out)?;
            formats::write_json(&GridFile::from_grid(&g), &a.out.join("grid.json"))?;
            g
        }
        _ => return Err("need --grid or --volume".into()),
    };
    let params = RrtParams {
        seed: a.seed,
        ..RrtParams::default()
    };
    let p = rrt_plan(&grid, Vec2::new(a.start[0], a.start[1]), Vec2::new(a.goal[0], a.goal[1]), &params)?;
    std::fs::create_dir_all(&a.out)?;
    formats::write_json(&PathFile::from(&p), &a.out.join("path.json"))?;
    println!("{} waypoints, length {:.3} m", p.waypoints.len(), p.cost);
    Ok(true)
}

fn simulate(a: SimArgs) -> AnyResult<bool> {
    let mut configs = Vec::new();
    for p in &a.config {
        configs.push(ScenarioConfig::load(p)?);
    }
    if configs.is_empty() {
        configs = match a.suite.as_str() {
            "default" => scenario::default_suite(),
            "latency" => scenario::latency_suite(),
            "all" => scenario::default_suite().into_iter().chain(scenario::latency_suite()).collect(),
            s => return Err(format!("unknown suite {s:?}").into()),
        };
    }
    let mut ok = true;
    for mut cfg in configs {
        a.overrides.apply(&mut cfg)?;
        let o = run_scenario(&cfg)?;
        o.write_bundle(&a.out.join(&o.name))?;
        let status = if o.succeeded() { "ok" } else { "FAILED" };
        let pred = o
            .prediction_errors()
            .map(|(p, h)| format!(", prediction error {:.4} m mean / {:.4} m max (hold {:.4} m)", p.mean, p.max, h.mean))
            .unwrap_or_default();
        println!("{}: {status}{pred}", o.name);
        if let Some(f) = &o.failure {
            println!("  {f}");
        }
        ok &= o.succeeded();
    }
    Ok(ok)
}

fn serve_cmd(a: ServeArgs) -> AnyResult<bool> {
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => scenario::approach_object(),
    };
    a.overrides.apply(&mut cfg)?;
    cfg.duration_s = f64::MAX;
    let h = serve(cfg, &a.addr)?;
    println!("serving on ws://{}", h.addr);
    h.wait();
    Ok(true)
}
