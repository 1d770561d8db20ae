use std::fmt::Write as _;
use std::path::Path;

use pdfuse::ablation::{cells, grid_csv, run_grid, Grid};
use pdfuse::autodiff::GradCheckConfig;
use pdfuse::data::{build_dataset, load_dataset, read_pfm, write_pfm, Dataset, PerturbProfile, SceneConfig};
use pdfuse::diffusion::NoiseSchedule;
use pdfuse::gradsuite::run_suite;
use pdfuse::init::Init;
use pdfuse::pdam::{replicate3, Pdam, PdamConfig, PseudoDepthSet};
use pdfuse::segnet::{
    evaluate, load_checkpoint, save_checkpoint, trace_csv, train, PredictOptions, SegNet, SegNetConfig, TrainConfig,
};
use pdfuse::{ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{
    AblateArgs, AggregateArgs, Cli, Command, Dtype, EvalArgs, GenDataArgs, GradcheckArgs, ModelArgs, ScheduleArgs,
    TrainArgs,
};
use crate::CliError;

type Res<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Res<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn widths(flag: &str, v: &str) -> Res<(usize, usize)> {
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| usage(format!("--{flag}: bad width in {v:?}")));
    let (a, b) = v.split_once(',').ok_or_else(|| usage(format!("--{flag} takes two widths, e.g. 16,32")))?;
    Ok((parse(a)?, parse(b)?))
}

impl ModelArgs {
    fn to_config(&self, seed: u64, maps: usize) -> Res<TrainConfig> {
        let cfg = self.build(seed, maps)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn build(&self, seed: u64, maps: usize) -> Res<TrainConfig> {
        Ok(TrainConfig {
            model: SegNetConfig {
                classes: self.classes,
                stem_widths: widths("stem-widths", &self.stem_widths)?,
                encoder_widths: widths("encoder-widths", &self.encoder_widths)?,
                unet_width: self.unet_width,
                fusion: self.fusion.parse()?,
                pd_source: self.pd_source.parse()?,
                maps,
                t: self.t,
                lambda_c: self.lambda_c,
                lambda_s: self.lambda_s,
            },
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr_backbone: self.lr_backbone,
            lr_rest: self.lr_rest,
            weight_decay: self.weight_decay,
            lr_decay_step: self.lr_decay_step,
            lr_decay_factor: self.lr_decay_factor,
            eval_interval: self.eval_interval,
            seed,
        })
    }

    /// Config echo without the map count, which comes from the dataset.
    fn echo(&self, seed: u64) -> Res<String> {
        let text = self.build(seed, 0)?.to_echo();
        Ok(text.lines().filter(|l| !l.starts_with("maps ")).map(|l| format!("{l}\n")).collect())
    }
}

fn load_data<F: Scalar>(manifest: &Path, tags: &[String]) -> Res<Dataset<F>> {
    let data = load_dataset::<F>(manifest)?;
    if tags.is_empty() {
        Ok(data)
    } else {
        Ok(data.select_tags(tags)?)
    }
}

fn maps_in<F: Scalar>(data: &Dataset<F>) -> usize {
    data.train.first().or(data.test.first()).map_or(0, |s| s.pd_set.len())
}

/// Fully resolved settings of a run, recorded as comments in its echo file.
pub fn resolved_config(cli: &Cli) -> Res<String> {
    let mut out = format!("dtype = {:?}\nseed = {}\n", cli.global.dtype, cli.global.seed).to_lowercase();
    match &cli.command {
        Command::Train(a) => out.push_str(&a.model.echo(cli.global.seed)?),
        Command::Ablate(a) => {
            a.grid.parse::<Grid>()?;
            out.push_str(&a.model.echo(cli.global.seed)?);
        }
        Command::Schedule(a) => {
            a.kind.parse::<pdfuse::diffusion::ScheduleKind>()?;
        }
        _ => {}
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Res<()> {
    let out = cli.global.out_dir.as_path();
    let seed = cli.global.seed;
    match (&cli.command, cli.global.dtype) {
        (Command::GenData(a), _) => gen_data(a, seed, out),
        (Command::Aggregate(a), Dtype::F32) => aggregate::<f32>(a, out),
        (Command::Aggregate(a), Dtype::F64) => aggregate::<f64>(a, out),
        (Command::Gradcheck(a), _) => gradcheck(a, seed, out),
        (Command::Schedule(a), _) => schedule(a, out),
        (Command::Train(a), Dtype::F32) => train_cmd::<f32>(a, seed, out),
        (Command::Train(a), Dtype::F64) => train_cmd::<f64>(a, seed, out),
        (Command::Eval(a), Dtype::F32) => eval_cmd::<f32>(a, out),
        (Command::Eval(a), Dtype::F64) => eval_cmd::<f64>(a, out),
        (Command::Ablate(a), Dtype::F32) => ablate::<f32>(a, seed, out),
        (Command::Ablate(a), Dtype::F64) => ablate::<f64>(a, seed, out),
    }
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &Path) -> Res<()> {
    let profiles = a
        .profiles
        .iter()
        .map(|p| PerturbProfile::by_name(p))
        .collect::<pdfuse::Result<Vec<_>>>()?;
    let cfg = SceneConfig {
        image_size: a.image_size,
        num_classes: a.classes,
        seed,
        ..SceneConfig::default()
    };
    let manifest = build_dataset(out, a.train, a.test, &cfg, &profiles)?;
    println!(
        "wrote {} samples with maps {:?} to {}",
        manifest.entries.len(),
        a.profiles,
        out.join(pdfuse::data::MANIFEST_NAME).display()
    );
    Ok(())
}

fn aggregate<F: Scalar>(a: &AggregateArgs, out: &Path) -> Res<()> {
    let planes = a
        .inputs
        .iter()
        .map(|p| read_pfm::<F>(p).and_then(|t| replicate3(&t)))
        .collect::<pdfuse::Result<Vec<_>>>()?;
    let tags = a.inputs.iter().map(|p| p.display().to_string()).collect();
    let set = PseudoDepthSet::new(planes, tags)?;
    let cfg = PdamConfig::new(set.len()).with_lambdas(a.lambda_c, a.lambda_s);
    let pdam = Pdam::new(cfg, "pdam")?;
    let store: ParamStore<F> = match &a.params {
        Some(path) => ParamStore::load(path)?.0,
        None => {
            let mut store = ParamStore::new();
            pdam.register(&mut store, Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0))?;
            store
        }
    };
    let fused = pdam.aggregate_set(&store, &set)?;
    let [_, _, h, w] = fused.dims4();
    let first = fused.narrow(1, 0, 1)?;
    let uniform = (1..3).all(|c| fused.narrow(1, c, 1).is_ok_and(|p| p.data() == first.data()));
    let map: Tensor<F> = if uniform { first.reshape(&[1, 1, h, w])? } else { fused };
    let path = out.join(&a.out);
    write_pfm(&path, &map)?;
    println!("aggregated {} maps into {}", set.len(), path.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64, out: &Path) -> Res<()> {
    let cfg = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        seed,
        ..GradCheckConfig::default()
    };
    let outcomes = run_suite(a.seeds, a.filter.as_deref(), &cfg)?;
    let mut csv = String::from("case,seeds,coords,kinks,max_rel_error,worst_seed,worst_input,passed\n");
    for o in &outcomes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.3e},{},{},{}",
            o.name,
            o.seeds,
            o.coords,
            o.kinks,
            o.max_rel_error,
            o.worst_seed,
            o.worst_input,
            o.passed()
        );
        println!("{:20} max rel err {:.3e} {}", o.name, o.max_rel_error, if o.passed() { "ok" } else { "FAILED" });
    }
    write_file(&out.join("gradcheck.csv"), csv)?;
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient case(s) failed")));
    }
    Ok(())
}

fn schedule(a: &ScheduleArgs, out: &Path) -> Res<()> {
    let s = NoiseSchedule::build(a.steps, a.beta_start, a.beta_end, a.kind.parse()?)?;
    write_file(&out.join("schedule.tsv"), s.table())?;
    let (w_rgb, w_pd) = s.weights(0)?;
    println!("t=0 weights {w_rgb:.6} : {w_pd:.6} (ratio {:.5})", w_pd / w_rgb);
    Ok(())
}

fn train_cmd<F: Scalar>(a: &TrainArgs, seed: u64, out: &Path) -> Res<()> {
    let data = load_data::<F>(&a.data, &a.tags)?;
    let cfg = a.model.to_config(seed, maps_in(&data))?;
    let run = train(&data.train, &data.test, &cfg)?;
    write_file(&out.join("trace.csv"), trace_csv(&run.trace))?;
    save_checkpoint(out.join("checkpoint.bin"), &run.params, &cfg)?;
    run.check()?;
    if let Some(last) = run.trace.last() {
        println!("iteration {}: ce {:.4}, dice {:.4}", last.iteration, last.ce, last.dice);
    }
    Ok(())
}

fn eval_cmd<F: Scalar>(a: &EvalArgs, out: &Path) -> Res<()> {
    let data = load_data::<F>(&a.data, &a.tags)?;
    let (store, cfg) = load_checkpoint::<F>(&a.checkpoint)?;
    let net = SegNet::new(cfg.model)?;
    let opts = if a.multi_scale {
        PredictOptions::multi_scale()
    } else {
        PredictOptions::single_scale()
    };
    let cm = evaluate(&net, &store, &data.test, &opts)?;
    let s = cm.scores()?;
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "pa,{:.6}\nma,{:.6}\nmiou,{:.6}", s.pixel_acc, s.mean_acc, s.miou);
    for (c, iou) in cm.class_iou().iter().enumerate() {
        let _ = writeln!(csv, "iou_{c},{}", iou.map(|v| format!("{v:.6}")).unwrap_or_default());
    }
    write_file(&out.join("eval.csv"), csv)?;
    println!(
        "PA {:.2}  MA {:.2}  mIoU {:.2}",
        100.0 * s.pixel_acc,
        100.0 * s.mean_acc,
        100.0 * s.miou
    );
    Ok(())
}

fn ablate<F: Scalar>(a: &AblateArgs, seed: u64, out: &Path) -> Res<()> {
    let grid: Grid = a.grid.parse()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let data = load_data::<F>(&a.data, &[])?;
    let base = a.model.to_config(seed, maps_in(&data))?;
    let mut selected = cells(grid, &base);
    if !a.cells.is_empty() {
        if let Some(bad) = a.cells.iter().find(|n| !selected.iter().any(|c| &&c.name == n)) {
            return Err(usage(format!("grid {} has no cell {bad:?}", a.grid)));
        }
        selected.retain(|c| a.cells.contains(&c.name));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| seed + i).collect();
    let results = run_grid(&selected, &data, &seeds, |cell, s, r| match r {
        Ok(sc) => eprintln!("{:12} seed {s}: mIoU {:.2}", cell.name, 100.0 * sc.miou),
        Err(e) => eprintln!("{:12} seed {s}: failed: {e}", cell.name),
    });
    let csv = grid_csv(&results);
    write_file(&out.join(format!("ablation_{}.csv", a.grid)), &csv)?;
    print!("{csv}");
    Ok(())
}
