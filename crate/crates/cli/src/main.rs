use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use exactmesh::baseline::{iou, marching_cubes, surface_metrics, AnalyticShape, Occupancy, SurfaceSampler};
use exactmesh::march::{FaceMode, MarchError};
use exactmesh::mesh::{read_obj, read_ply, simplify_qecd, triangulate, weld, write_obj, write_ply, MeshError};
use exactmesh::net::{load_network, region_count_lower_bound, save_network, state_space_size};
use exactmesh::train::{fit_direct, parse_arch, Optimizer, TrainConfig, TrainError, TrainMode};
use exactmesh::trigger::{TriggerError, TriggerScheme};
use exactmesh::{march, Aabb, MarchConfig, Marched, NetworkSpec, PolygonMesh, Tolerances, TriangleMesh, Vec3};

#[derive(Parser)]
#[command(name = "exactmesh", version, about = "Exact meshing of ReLU implicit surface networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the exact zero-level-set mesh of a network.
    Mesh(MeshArgs),
    /// Compare analytic marching with marching cubes against a ground truth.
    Compare(CompareArgs),
    /// Fit a ReLU MLP to an analytic shape.
    Fit(FitArgs),
    /// Simplify a mesh by quadric edge collapse.
    Simplify(SimplifyArgs),
    /// Count visited regions against the theoretical bounds.
    Census(CensusArgs),
}

#[derive(Args)]
struct MarchArgs {
    /// Surface-point search: sgd, st (sphere tracing) or dich (bisection).
    #[arg(long, default_value = "dich")]
    trigger: TriggerScheme,
    /// Number of seed points.
    #[arg(long, default_value_t = 64)]
    seeds: usize,
    /// Worker threads.
    #[arg(long, env = "EXACTMESH_THREADS", default_value_t = 1)]
    threads: usize,
    /// Working box as x0,y0,z0,x1,y1,z1.
    #[arg(long, value_parser = parse_bbox, default_value = "-1.2,-1.2,-1.2,1.2,1.2,1.2")]
    bbox: Aabb,
    /// Face extraction: pivot or naive.
    #[arg(long, default_value = "pivot")]
    mode: FaceMode,
    /// Stop after this many regions.
    #[arg(long, default_value_t = 10_000_000)]
    max_cells: usize,
    /// Seed for seed-point sampling.
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
}

impl MarchArgs {
    fn config(&self) -> MarchConfig {
        MarchConfig {
            bbox: self.bbox,
            seeds: self.seeds,
            trigger: self.trigger,
            threads: self.threads,
            face_mode: self.mode,
            max_cells: self.max_cells,
            rng_seed: self.rng_seed,
            ..MarchConfig::default()
        }
    }
}

#[derive(Args)]
struct MeshArgs {
    /// Network in the interchange JSON format.
    #[arg(long)]
    net: PathBuf,
    /// Output mesh, .obj (polygons) or .ply (triangles).
    #[arg(long)]
    out: PathBuf,
    /// Keep this fraction of triangles after meshing.
    #[arg(long)]
    simplify: Option<f64>,
    /// Write the march report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    march: MarchArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Network in the interchange JSON format.
    #[arg(long)]
    net: PathBuf,
    /// Analytic ground truth, e.g. sphere:0.5, box:0.4, torus:0.5,0.2, l1ball:0.5.
    #[arg(long, conflicts_with = "gt_mesh")]
    shape: Option<AnalyticShape>,
    /// Ground-truth mesh (.obj or .ply).
    #[arg(long)]
    gt_mesh: Option<PathBuf>,
    /// Marching-cubes resolutions.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    resolutions: Vec<usize>,
    /// Surface samples per mesh for Chamfer distance and F-score.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// F-score distance threshold.
    #[arg(long, default_value_t = 5e-3)]
    tau: f64,
    /// Occupancy grid resolution for IoU.
    #[arg(long, default_value_t = 128)]
    iou_res: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    march: MarchArgs,
}

/// Parsed `--arch`; a bare `Vec` would make clap expect repeated values.
#[derive(Clone)]
struct Arch(Vec<usize>);

#[derive(Args)]
struct FitArgs {
    /// Target shape, e.g. sphere:0.5.
    #[arg(long)]
    shape: AnalyticShape,
    /// Hidden widths as WIDTHxDEPTH or W1,W2,...
    #[arg(long, default_value = "16x4", value_parser = |s: &str| parse_arch(s).map(Arch))]
    arch: Arch,
    /// regression or eikonal.
    #[arg(long, default_value = "regression")]
    mode: TrainMode,
    /// sgd or adam.
    #[arg(long, default_value = "sgd")]
    optimizer: Optimizer,
    /// Training epochs.
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// Optimizer steps per epoch, each on a fresh batch.
    #[arg(long, default_value_t = 4)]
    steps_per_epoch: usize,
    /// Points per batch.
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Learning rate [default: 1e-2].
    #[arg(long)]
    lr: Option<f64>,
    /// Start from this network instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output network.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Seed for initialization and sampling.
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
}

#[derive(Args)]
struct SimplifyArgs {
    /// Input mesh (.obj or .ply).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output mesh (.obj or .ply).
    #[arg(long)]
    out: PathBuf,
    /// Fraction of triangles to keep, in (0, 1].
    #[arg(long)]
    ratio: f64,
}

#[derive(Args)]
struct CensusArgs {
    /// Network to march; optional when --widths is given.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Hidden widths for the region lower bound without a network.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Input dimension for --widths.
    #[arg(long, default_value_t = 3)]
    n0: usize,
    #[command(flatten)]
    march: MarchArgs,
}

fn parse_bbox(s: &str) -> Result<Aabb, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad coordinate `{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [x0, y0, z0, x1, y1, z1] = v[..] else {
        return Err("expected six numbers x0,y0,z0,x1,y1,z1".into());
    };
    let b = Aabb::new(Vec3::new(x0, y0, z0), Vec3::new(x1, y1, z1));
    if !b.is_valid() {
        return Err("box must have positive finite extent".into());
    }
    Ok(b)
}

/// Error tagged with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 1;
const IO: u8 = 2;
const NO_SURFACE: u8 = 3;
const CAPPED: u8 = 4;

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<MarchError> for Failure {
    fn from(e: MarchError) -> Self {
        let code = match &e {
            MarchError::Trigger(TriggerError::NoSurface) => NO_SURFACE,
            MarchError::Net(_) => IO,
            _ => USAGE,
        };
        Failure::new(code, e)
    }
}

type CmdResult = Result<(), Failure>;

trait Tag<T> {
    fn tag(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Mesh(a) => cmd_mesh(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Simplify(a) => cmd_simplify(&a),
        Command::Census(a) => cmd_census(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn init_threads(threads: usize) -> CmdResult {
    if threads == 0 {
        return Err(Failure::new(USAGE, anyhow!("--threads must be at least 1")));
    }
    // The global pool can only be configured once; a second call is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn load_net(path: &Path) -> Result<NetworkSpec, Failure> {
    load_network(path).tag(IO)
}

fn run_march(net: &NetworkSpec, args: &MarchArgs) -> Result<Marched, Failure> {
    init_threads(args.threads)?;
    Ok(march(net, &args.config())?)
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn read_mesh(path: &Path) -> Result<TriangleMesh, Failure> {
    if has_ext(path, "ply") {
        read_ply(path).tag(IO)
    } else if has_ext(path, "obj") {
        Ok(triangulate(&read_obj(path).tag(IO)?))
    } else {
        Err(Failure::new(USAGE, anyhow!("{}: expected a .obj or .ply file", path.display())))
    }
}

fn check_out_ext(path: &Path) -> CmdResult {
    if has_ext(path, "obj") || has_ext(path, "ply") {
        Ok(())
    } else {
        Err(Failure::new(USAGE, anyhow!("{}: output must end in .obj or .ply", path.display())))
    }
}

fn write_polygons(path: &Path, mesh: &PolygonMesh) -> CmdResult {
    if has_ext(path, "ply") {
        write_ply(path, &triangulate(mesh)).tag(IO)
    } else {
        write_obj(path, mesh).tag(IO)
    }
}

fn write_triangles(path: &Path, mesh: &TriangleMesh) -> CmdResult {
    if has_ext(path, "ply") {
        write_ply(path, mesh).tag(IO)
    } else {
        write_obj(path, &mesh.to_polygon_mesh()).tag(IO)
    }
}

fn simplify(mesh: &TriangleMesh, ratio: f64) -> Result<TriangleMesh, Failure> {
    simplify_qecd(mesh, ratio).map_err(|e| {
        let code = if matches!(e, MeshError::Ratio(_)) { USAGE } else { IO };
        Failure::new(code, e)
    })
}

fn write_json(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).tag(IO)
}

fn cmd_mesh(a: &MeshArgs) -> CmdResult {
    check_out_ext(&a.out)?;
    if let Some(r) = a.simplify {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Failure::new(USAGE, anyhow!("--simplify must be in (0, 1], got {r}")));
        }
    }
    let net = load_net(&a.net)?;
    let marched = run_march(&net, &a.march)?;
    let (mesh, _) = marched.polygon_mesh(Tolerances::default().weld);
    match a.simplify {
        Some(r) => write_triangles(&a.out, &simplify(&triangulate(&mesh), r)?)?,
        None => write_polygons(&a.out, &mesh)?,
    }
    if let Some(path) = &a.report {
        write_json(path, &exactmesh::json::to_string(&marched.report))?;
    }
    log::info!(
        "{} cells, {} faces, {} open edges in {:.3}s",
        marched.report.cells_visited,
        marched.report.faces_emitted,
        marched.report.open_edges,
        marched.report.seconds
    );
    if marched.report.capped {
        return Err(Failure::new(CAPPED, anyhow!("stopped at --max-cells {}; the mesh is partial", a.march.max_cells)));
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    method: &'static str,
    resolution: Option<usize>,
    cd: f64,
    fscore: f64,
    iou: f64,
    tri_faces: usize,
    seconds: f64,
}

fn cmd_compare(a: &CompareArgs) -> CmdResult {
    enum Truth {
        Shape(AnalyticShape),
        Mesh(TriangleMesh),
    }
    let truth = match (&a.shape, &a.gt_mesh) {
        (Some(s), _) => Truth::Shape(*s),
        (None, Some(p)) => Truth::Mesh(read_mesh(p)?),
        (None, None) => return Err(Failure::new(USAGE, anyhow!("a ground truth is required: pass --shape or --gt-mesh"))),
    };
    if a.resolutions.iter().any(|&r| r < 2) || a.samples == 0 || a.iou_res == 0 {
        return Err(Failure::new(USAGE, anyhow!("resolutions must be at least 2 and sample counts positive")));
    }
    let net = load_net(&a.net)?;
    let (gt_surface, gt_occ): (&dyn SurfaceSampler, &dyn Occupancy) = match &truth {
        Truth::Shape(s) => (s, s),
        Truth::Mesh(m) => (m, m),
    };
    let bbox = a.march.bbox;
    let row = |method, resolution, mesh: &TriangleMesh, seconds| {
        let m = surface_metrics(mesh, gt_surface, a.samples, a.tau, a.march.rng_seed);
        CompareRow {
            method,
            resolution,
            cd: m.chamfer,
            fscore: m.fscore,
            iou: iou(mesh, gt_occ, a.iou_res, &bbox),
            tri_faces: mesh.triangles.len(),
            seconds,
        }
    };
    let t = Instant::now();
    let marched = run_march(&net, &a.march)?;
    let am = triangulate(&marched.polygon_mesh(Tolerances::default().weld).0);
    let mut rows = vec![row("am", None, &am, t.elapsed().as_secs_f64())];
    for &res in &a.resolutions {
        let t = Instant::now();
        let mc = marching_cubes(&net, res, &bbox);
        rows.push(row("mc", Some(res), &mc, t.elapsed().as_secs_f64()));
    }
    let text = exactmesh::json::to_string(&rows);
    match &a.out {
        Some(p) => write_json(p, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct FitLog<'a> {
    config: &'a TrainConfig,
    epochs: &'a [exactmesh::train::EpochLog],
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let mut cfg = TrainConfig {
        widths: a.arch.0.clone(),
        mode: a.mode,
        optimizer: a.optimizer,
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        batch: a.batch,
        rng_seed: a.rng_seed,
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let init = a.init.as_deref().map(load_net).transpose()?;
    let fitted = fit_direct(&a.shape, &cfg, init.as_ref()).map_err(|e| {
        let code = match e {
            TrainError::Config(_) | TrainError::Init(_) => USAGE,
            TrainError::NonFinite { .. } => IO,
        };
        Failure::new(code, e)
    })?;
    save_network(&fitted.net, &a.out).tag(IO)?;
    if let Some(path) = &a.log {
        let log = FitLog {
            config: &cfg,
            epochs: &fitted.log,
        };
        write_json(path, &exactmesh::json::to_string(&log))?;
    }
    if let Some(last) = fitted.log.last() {
        log::info!("final epoch loss {:.6e}", last.loss);
    }
    Ok(())
}

fn cmd_simplify(a: &SimplifyArgs) -> CmdResult {
    check_out_ext(&a.out)?;
    let mesh = read_mesh(&a.input)?;
    let (welded, _) = weld(&mesh.to_polygon_mesh(), 0.0);
    let out = simplify(&triangulate(&welded), a.ratio)?;
    write_triangles(&a.out, &out)
}

#[derive(Serialize)]
struct Census {
    neurons: Option<usize>,
    cells_visited: Option<usize>,
    faces_emitted: Option<usize>,
    region_lower_bound: Option<String>,
    state_space: Option<String>,
    capped: bool,
}

fn cmd_census(a: &CensusArgs) -> CmdResult {
    let net = a.net.as_deref().map(load_net).transpose()?;
    let widths = match (&a.widths, &net) {
        (Some(w), _) => Some((w.clone(), a.n0)),
        (None, Some(n)) if !n.is_ensemble() => n.subnetworks[0].dense_widths().map(|w| (w, 3)),
        (None, Some(_)) => None,
        (None, None) => return Err(Failure::new(USAGE, anyhow!("pass --net or --widths"))),
    };
    let bound = match widths {
        Some((w, n0)) => Some(region_count_lower_bound(&w, n0).tag(USAGE)?.to_string()),
        None => None,
    };
    let mut census = Census {
        neurons: net.as_ref().map(|n| n.neuron_count()),
        cells_visited: None,
        faces_emitted: None,
        region_lower_bound: bound,
        state_space: net.as_ref().map(|n| state_space_size(n.neuron_count()).to_string()),
        capped: false,
    };
    if let Some(net) = &net {
        let marched = run_march(net, &a.march)?;
        census.cells_visited = Some(marched.report.cells_visited);
        census.faces_emitted = Some(marched.report.faces_emitted);
        census.capped = marched.report.capped;
    }
    println!("{}", exactmesh::json::to_string(&census));
    if census.capped {
        return Err(Failure::new(CAPPED, anyhow!("region cap --max-cells {} reached; counts are partial", a.march.max_cells)));
    }
    Ok(())
}
