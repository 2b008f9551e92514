use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use lightseg::bench::{self, format_table, TableRow};
use lightseg::convert::convert_to_dilated;
use lightseg::data::{self, GenConfig, Task};
use lightseg::gate::{self, SearchConfig};
use lightseg::model::{argmax_classes, predict};
use lightseg::train::{self, bn_depth, TrainConfig};
use lightseg::{checkpoint, ops, Error, NetworkSpec, ParamStore, Shape, Tensor, Variant};

/// Light dilated residual segmentation networks and dilation-rate search.
#[derive(Parser, Debug)]
#[command(name = "lightseg", version)]
struct Cli {
    /// JSON file with settings for the subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (PNG images and masks).
    GenData(GenArgs),
    /// Train a network and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Search dilation rates of the last four residual units.
    Search(SearchArgs),
    /// Convert a network to output stride 8.
    Convert(ConvertArgs),
    /// Evaluate a checkpoint (mean IoU).
    Eval(EvalArgs),
    /// Measure inference latency of the network variants.
    Bench(BenchArgs),
    /// Draw predicted masks over an image.
    Overlay(OverlayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Blobs,
    Planted,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Planted task: partner distance in 8-pixel cells (1, 2, 4, 8 or 16).
    #[arg(long)]
    offset: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Keep output stride 32.
    #[arg(long)]
    no_convert: bool,
    /// Dilations of the last residual units, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    dilations: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Crop side in pixels; 0 trains on full images.
    #[arg(long)]
    crop: Option<usize>,
    /// Pad crops that are not a multiple of the output stride.
    #[arg(long)]
    pad_crop: bool,
    #[arg(long)]
    lr: Option<f64>,
    /// Paper-scale defaults (batch 32, crop 800).
    #[arg(long)]
    paper: bool,
    /// Run kernels on all cores.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Network spec JSON (e.g. from `search`); overrides variant and dilations.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Evaluation dataset; writes eval.json after training.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Input spec JSON; defaults to a freshly built `--variant`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "light_v1")]
    variant: Variant,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Recompute BN statistics on this many samples first.
    #[arg(long, default_value_t = 0)]
    recompute: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Variants to time; all three by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Use the 1024x1280 input of the original latency table.
    #[arg(long)]
    paper_size: bool,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Time unconverted (output stride 32) networks.
    #[arg(long)]
    no_convert: bool,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// RGB PNG image.
    #[arg(long)]
    image: PathBuf,
    /// Output PNG; defaults to <out>/overlay.png.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Data {
                    path: p.to_path_buf(),
                    msg: format!("bad config: {e}"),
                }
                .into()
            })
        }
    }
}

fn write(path: PathBuf, text: &str) -> anyhow::Result<()> {
    fs::write(&path, text).map_err(Error::from)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_spec(path: &Path) -> anyhow::Result<NetworkSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(NetworkSpec::from_json(&text)?)
}

fn apply_flags(cfg: &mut TrainConfig, f: &TrainFlags, seed: Option<u64>) {
    if f.paper {
        let p = TrainConfig::paper();
        cfg.batch_size = p.batch_size;
        cfg.crop_size = p.crop_size;
    }
    if let Some(v) = f.variant {
        cfg.variant = v;
    }
    if f.no_convert {
        cfg.convert = false;
    }
    if f.dilations.is_some() {
        cfg.dilations = f.dilations.clone();
    }
    if let Some(s) = f.steps {
        cfg.total_steps = s;
    }
    if let Some(b) = f.batch {
        cfg.batch_size = b;
    }
    if let Some(c) = f.crop {
        cfg.crop_size = (c > 0).then_some(c);
    }
    if f.pad_crop {
        cfg.pad_crop = true;
    }
    if let Some(lr) = f.lr {
        cfg.base_lr = lr;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ops::set_parallel(f.parallel);
}

fn gen_data(cli: &Cli, a: &GenArgs) -> anyhow::Result<()> {
    let mut cfg: GenConfig = load_config(cli.config.as_deref())?;
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::Blobs => Task::Blobs,
            TaskArg::Planted => Task::PlantedDilation,
        };
    }
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.num_classes = a.classes.unwrap_or(cfg.num_classes);
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    if a.offset.is_some() {
        cfg.planted_offset = a.offset;
    }
    let ds = data::generate(&cfg)?;
    data::save_dataset(&ds, &cli.out)?;
    println!("wrote {} samples to {}", ds.len(), cli.out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    apply_flags(&mut cfg, &a.flags, cli.seed);
    let ds = data::load_dataset(&a.flags.data, None)?;
    cfg.num_classes = ds.num_classes;
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => cfg.build_spec()?,
    };
    let out = match train::train(&spec, &ds, &cfg) {
        Err(Error::Diverged { step, trace }) => {
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            write(cli.out.join("loss.csv"), &trace)?;
            return Err(Error::Diverged { step, trace }.into());
        }
        other => other?,
    };
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write(cli.out.join("spec.json"), &spec.to_json()?)?;
    write(cli.out.join("loss.csv"), &out.log.to_csv())?;
    checkpoint::save(cli.out.join("params.ckpt"), &out.params)?;
    println!("wrote {}", cli.out.join("params.ckpt").display());
    if let Some(last) = out.log.rows.last() {
        println!("final loss {:.4} after {} steps", last.loss, out.log.rows.len());
    }
    if let Some(eval_dir) = &a.eval {
        let eds = data::load_dataset(eval_dir, Some(spec.num_classes))?;
        let report = train::evaluate(&spec, &out.params, &eds)?;
        write(cli.out.join("eval.json"), &report.to_json()?)?;
        print!(
            "{}",
            format_table(&[TableRow {
                model: model_name(&spec),
                iou: Some(report.mean_iou),
                time_ms: None
            }])
        );
    }
    Ok(())
}

fn model_name(spec: &NetworkSpec) -> String {
    let mut name = spec.variant.to_string();
    if spec.converted {
        name = format!("dilated {name}");
    }
    if let Some(d) = &spec.searched_dilations {
        name.push_str(&format!(" w/ dilations {d:?}"));
    }
    name
}

fn search_cmd(cli: &Cli, a: &SearchArgs) -> anyhow::Result<()> {
    let mut cfg: SearchConfig = load_config(cli.config.as_deref())?;
    apply_flags(&mut cfg.train, &a.flags, cli.seed);
    if let Some(c) = &a.candidates {
        cfg.candidates = c.clone();
    }
    cfg.tau0 = a.tau0.unwrap_or(cfg.tau0);
    cfg.tau_min = a.tau_min.unwrap_or(cfg.tau_min);
    let ds = data::load_dataset(&a.flags.data, None)?;
    cfg.train.num_classes = ds.num_classes;
    let base = cfg.train.build_spec()?;
    let out = match gate::run_search(&base, &ds, &cfg) {
        Err(Error::Diverged { step, trace }) => {
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            write(cli.out.join("search.csv"), &trace)?;
            return Err(Error::Diverged { step, trace }.into());
        }
        other => other?,
    };
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write(cli.out.join("search.csv"), &out.log.to_csv())?;
    write(cli.out.join("spec.json"), &out.decoded.to_json()?)?;
    write(
        cli.out.join("gates.json"),
        &serde_json::to_string_pretty(&out.states)?,
    )?;
    println!("decoded dilations {:?}", out.assignment.0);
    Ok(())
}

fn convert_cmd(cli: &Cli, a: &ConvertArgs) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => lightseg::build_network(a.variant, a.classes)?,
    };
    let converted = convert_to_dilated(&spec)?;
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write(cli.out.join("spec.json"), &converted.to_json()?)?;
    println!(
        "output stride {} -> {}; BN statistics must be recomputed",
        spec.output_stride(),
        converted.output_stride()
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let spec = read_spec(&a.spec)?;
    let mut params: ParamStore<f32> = checkpoint::load(&a.ckpt)?;
    params.check_against(&spec)?;
    let ds = data::load_dataset(&a.data, Some(spec.num_classes))?;
    if a.recompute > 0 {
        let images: Vec<Tensor<f32>> = ds.samples.iter().take(a.recompute).map(|s| s.image.clone()).collect();
        train::recompute_bn_stats(&spec, &mut params, &images, bn_depth(&spec))?;
    }
    if !params.stats_fresh(&spec) {
        eprintln!("warning: BN statistics were not estimated for this network geometry (use --recompute)");
    }
    let report = train::evaluate(&spec, &params, &ds)?;
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write(cli.out.join("eval.json"), &report.to_json()?)?;
    print!(
        "{}",
        format_table(&[TableRow {
            model: model_name(&spec),
            iou: Some(report.mean_iou),
            time_ms: None
        }])
    );
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> anyhow::Result<()> {
    ops::set_parallel(a.parallel);
    let (h, w) = if a.paper_size { (1024, 1280) } else { (a.height, a.width) };
    let shape = Shape::new(1, 3, h, w);
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let mut nets = Vec::new();
    for v in variants {
        let mut spec = lightseg::build_network(v, a.classes)?;
        if !a.no_convert {
            spec = convert_to_dilated(&spec)?;
        }
        let params = ParamStore::<f32>::init(&spec, cli.seed.unwrap_or(0));
        nets.push((spec, params));
    }
    let refs: Vec<_> = nets.iter().map(|(s, p)| (s, p)).collect();
    let reports = bench::benchmark_all(&refs, shape, a.warmup, a.iters, cli.seed.unwrap_or(0))?;
    let mut rows = Vec::new();
    for ((spec, _), r) in nets.iter().zip(&reports) {
        println!(
            "{}: median {:.2} ms, p95 {:.2} ms, {:.1} FPS, {:.2} GMAC",
            model_name(spec),
            r.median_ms,
            r.p95_ms,
            r.fps,
            r.flops as f64 / 1e9
        );
        rows.push(TableRow {
            model: model_name(spec),
            iou: None,
            time_ms: Some(r.median_ms),
        });
    }
    let mut table = format_table(&rows);
    table.push_str(&format!(
        "\ninput {h}x{w}, {} threads, median of {} interleaved iterations after {} warmup.\n\
         Reference GPU timings at 1024x1280 (not comparable, not asserted): \
         dilated ResNet-18 126 ms, light v1 17.4 ms, light v2 11.8 ms.\n",
        ops::kernel_threads(),
        a.iters,
        a.warmup
    ));
    print!("{table}");
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write(cli.out.join("bench.json"), &serde_json::to_string_pretty(&reports)?)?;
    write(cli.out.join("bench.txt"), &table)?;
    Ok(())
}

fn overlay_cmd(cli: &Cli, a: &OverlayArgs) -> anyhow::Result<()> {
    let spec = read_spec(&a.spec)?;
    let params: ParamStore<f32> = checkpoint::load(&a.ckpt)?;
    let img = image::open(&a.image)
        .map_err(|e| Error::Data {
            path: a.image.clone(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut x = vec![0f32; 3 * h * w];
    for (px, py, p) in img.enumerate_pixels() {
        for c in 0..3 {
            x[c * h * w + py as usize * w + px as usize] = f32::from(p.0[c]) / 255.0;
        }
    }
    let x = Tensor::from_vec(Shape::new(1, 3, h, w), x)?;
    let logits = predict(&spec, &params, &x)?;
    let mask = argmax_classes(&logits);
    let path = match &a.output {
        Some(p) => p.clone(),
        None => {
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            cli.out.join("overlay.png")
        }
    };
    bench::render_overlay(&x, &mask, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Search(a) => search_cmd(cli, a),
        Command::Convert(a) => convert_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Bench(a) => bench_cmd(cli, a),
        Command::Overlay(a) => overlay_cmd(cli, a),
    }
}

/// 1 usage, 2 data, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Data { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Checkpoint(_)) => 2,
        Some(Error::NonFinite(_) | Error::Diverged { .. } | Error::Autodiff(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
