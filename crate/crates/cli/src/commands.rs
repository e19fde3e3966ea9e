use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icm3d::checkpoint::{write_atomic, Checkpoint};
use icm3d::eval::svg::{distance_histogram, metrics_bars, sweep_chart};
use icm3d::eval::{
    evaluate_clouds, latency_bench, model_distance_overlap, oracle_predictions, overlap_sweep, DistanceOverlapReport,
    MetricsReport, SweepRow,
};
use icm3d::grid::{equivalence_violations, overlap_stats};
use icm3d::infer::{
    decode, parse_predictions_csv, partition_csv, partition_points, predictions_csv, InferConfig, InstancePrediction,
    OracleOutputs,
};
use icm3d::model::ModelConfig;
use icm3d::train::{TrainConfig, Trainer};
use icm3d::{build_targets, generate_dataset, generate_scene, CubeGrid, HeadKind, ModelParams, Paradigm, PointCloud, Real};

use crate::config::{Precision, RunConfig};
use crate::dataset::{load_dataset, scene_stem, write_dataset, Manifest};
use crate::exit::{UsageError, Violation};

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    RunConfig::require(&cfg.paths.out, "output directory (--out or paths.out)")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

fn load_clouds<T: Real>(dir: &Path) -> Result<(Manifest, Vec<PointCloud<T>>)> {
    let (manifest, clouds) = load_dataset(dir)?;
    Ok((manifest, clouds.iter().map(|c| c.cast()).collect()))
}

fn semantic_classes<T: Real>(clouds: &[PointCloud<T>]) -> usize {
    clouds.iter().flat_map(|c| c.semantic_labels().iter().copied()).max().unwrap_or(0) + 1
}

fn precision_of(checkpoint: &Checkpoint) -> Result<Precision> {
    match checkpoint.scalar.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => bail!(Violation(format!("checkpoint has unknown scalar type {other}"))),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Decoding of the ground-truth targets of one scene.
fn oracle_scene<T: Real>(
    cloud: &PointCloud<T>,
    grid: &CubeGrid,
    paradigm: Paradigm,
    scale: f64,
    classes: usize,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    let t = build_targets(cloud, grid, paradigm, T::of(scale))?;
    Ok(match paradigm {
        Paradigm::Flatten => oracle_predictions(&t, cloud.semantic_labels(), classes, cfg),
        Paradigm::Project => OracleOutputs::<f64>::from_targets(&t, cloud.semantic_labels(), classes).decode(cfg)?,
    })
}

fn model_predictions<T: Real>(
    params: &ModelParams<T>,
    clouds: &[PointCloud<T>],
    cfg: &InferConfig,
) -> Result<Vec<Vec<InstancePrediction>>> {
    let grid = CubeGrid::new(params.config.n_s)?;
    clouds.iter().map(|c| Ok(decode(&params.forward_inference(c, &grid)?, cfg)?)).collect()
}

fn oracle_paradigm(cfg: &RunConfig) -> Paradigm {
    cfg.train.paradigm.paradigm().unwrap_or(Paradigm::Flatten)
}

pub fn generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    if cfg.data.scenes == 0 {
        bail!(UsageError("data.scenes must be positive".into()));
    }
    let clouds = generate_dataset::<f64>(&cfg.scene, cfg.data.scenes)?;
    let manifest = write_dataset(out, &clouds, &cfg.scene, cfg.data.format, force)?;
    cfg.write_resolved(out)?;
    println!("scenes={}", manifest.scenes.len());
    println!("points={}", manifest.scenes.iter().map(|s| s.points).sum::<usize>());
    println!("instances={}", manifest.scenes.iter().map(|s| s.instances).sum::<usize>());
    for s in &manifest.scenes {
        println!("sha256.{}={}", scene_stem(s), s.sha256);
    }
    println!("manifest={}", out.join(crate::dataset::MANIFEST).display());
    eprintln!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

pub fn encode_check(cfg: &RunConfig, sweep: bool, allow_collisions: bool) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "dataset (--data or paths.data)")?;
    let (manifest, clouds) = load_clouds::<f64>(data)?;
    let out = cfg.paths.out.as_deref();
    if let Some(dir) = out {
        cfg.write_resolved(dir)?;
    }
    let n_s = cfg.train.n_s;
    let scale = cfg.train.center_scale;
    let grid = CubeGrid::new(n_s)?;
    let classes = semantic_classes(&clouds);

    if sweep {
        let dir = out.ok_or_else(|| UsageError("--sweep needs an output directory".into()))?;
        let rows = overlap_sweep(&clouds, &cfg.eval.sweep, scale, &cfg.infer)?;
        write_text(&dir.join("sweep.csv"), &SweepRow::to_csv(&rows))?;
        write_text(&dir.join("sweep.svg"), &sweep_chart(&rows, "Overlap rate and oracle precision by grid size"))?;
        for r in &rows {
            println!("overlap_rate@{}={:?}", r.n_s, r.overlap_rate);
        }
        println!("sweep_csv={}", dir.join("sweep.csv").display());
    }

    let mut problems = Vec::new();
    let mut round_trip_checked = 0;
    for (entry, cloud) in manifest.scenes.iter().zip(&clouds) {
        let scene = scene_stem(entry);
        let f = build_targets(cloud, &grid, Paradigm::Flatten, scale)?;
        let p = build_targets(cloud, &grid, Paradigm::Project, scale)?;
        for (cube, point) in equivalence_violations(&f, &p)?.into_iter().take(3) {
            let [x, y, z] = grid.unflatten_index(cube)?;
            problems.push(format!("{scene}: equivalence fails at cube {cube} ({x},{y},{z}) point {point}"));
        }
        if !f.collisions.is_empty() {
            if !allow_collisions {
                for &cube in &f.collisions {
                    let [x, y, z] = grid.unflatten_index(cube)?;
                    problems.push(format!("{scene}: cube {cube} ({x},{y},{z}) is claimed by several instances"));
                }
            }
            continue;
        }
        round_trip_checked += 1;
        let mut want: Vec<Vec<usize>> = cloud.instance_members().into_values().collect();
        want.sort();
        for paradigm in [Paradigm::Flatten, Paradigm::Project] {
            let preds = oracle_scene(cloud, &grid, paradigm, scale, classes, &cfg.infer)?;
            let mut got: Vec<Vec<usize>> = preds.into_iter().map(|p| p.points).collect();
            got.sort();
            if got != want {
                problems.push(format!("{scene}: {paradigm:?} oracle decoding does not reproduce the instances"));
            }
        }
    }
    let stats = overlap_stats(&clouds, &grid, scale)?;
    println!("scenes={}", clouds.len());
    println!("n_s={n_s}");
    println!("positive_cubes={}", stats.positive_cubes);
    println!("overlapped_cubes={}", stats.overlapped_cubes);
    println!("overlap_rate={:?}", stats.rate());
    println!("round_trip_scenes={round_trip_checked}");
    println!("violations={}", problems.len());
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        bail!(Violation(format!("{} violations; first: {}", problems.len(), problems[0])));
    }
    eprintln!("equivalence OK, round-trip OK, overlap {:?}", stats.rate());
    Ok(())
}

fn train_typed<T: Real>(cfg: &RunConfig, threads: usize) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "dataset (--data or paths.data)")?;
    let out = out_dir(cfg)?;
    let (_, clouds) = load_clouds::<T>(data)?;
    let trainer = match &cfg.paths.resume {
        Some(path) => Trainer::resume(&cfg.train, &clouds, &load_checkpoint(path)?)?,
        None => Trainer::new(&cfg.train, &clouds)?,
    };
    let mut trainer = trainer.with_threads(threads)?;
    cfg.write_resolved(out)?;
    let total = trainer.total_steps();
    let every = (total / 10).max(1);
    while !trainer.is_done() {
        trainer.run_until(trainer.step() + every)?;
        if let Some(l) = trainer.log().last() {
            eprintln!("step {}/{total} loss {:.5}", trainer.step(), l.total);
        }
    }
    let ck_path = out.join("checkpoint.json");
    trainer.checkpoint()?.save(&ck_path)?;
    write_text(&out.join("train_log.csv"), &trainer.log().to_csv())?;
    println!("steps={}", trainer.step());
    if let Some(l) = trainer.log().last() {
        println!("loss_total={}", l.total);
    }
    if let Some(test) = &cfg.paths.test_data {
        let (_, test_clouds) = load_clouds::<T>(test)?;
        let preds = model_predictions(trainer.params(), &test_clouds, &cfg.infer)?;
        let report = evaluate_clouds(&test_clouds, &preds)?;
        println!("test_mprec={}", report.mprec);
        println!("test_mrec={}", report.mrec);
    }
    println!("checkpoint={}", ck_path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, threads: usize) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, threads),
        Precision::F64 => train_typed::<f64>(cfg, threads),
    }
}

/// Predictions for every scene of `data` from the oracle or the configured checkpoint.
fn predict_typed<T: Real>(cfg: &RunConfig, checkpoint: Option<&Checkpoint>, data: &Path) -> Result<(Manifest, Vec<PointCloud<T>>, Vec<Vec<InstancePrediction>>, Option<ModelParams<T>>)> {
    let (manifest, clouds) = load_clouds::<T>(data)?;
    match checkpoint {
        Some(ck) => {
            let params = ck.params::<T>(None)?;
            let preds = model_predictions(&params, &clouds, &cfg.infer)?;
            Ok((manifest, clouds, preds, Some(params)))
        }
        None => {
            let grid = CubeGrid::new(cfg.train.n_s)?;
            let classes = semantic_classes(&clouds);
            let preds = clouds
                .iter()
                .map(|c| oracle_scene(c, &grid, oracle_paradigm(cfg), cfg.train.center_scale, classes, &cfg.infer))
                .collect::<Result<Vec<_>>>()?;
            Ok((manifest, clouds, preds, None))
        }
    }
}

fn write_predictions(dir: &Path, manifest: &Manifest, clouds_len: &[usize], preds: &[Vec<InstancePrediction>]) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut total = 0;
    for ((entry, &n), p) in manifest.scenes.iter().zip(clouds_len).zip(preds) {
        let stem = scene_stem(entry);
        write_text(&dir.join(format!("{stem}.csv")), &predictions_csv(p))?;
        write_text(&dir.join(format!("{stem}_partition.csv")), &partition_csv(&partition_points(p, n)))?;
        total += p.len();
    }
    Ok(total)
}

fn model_source(cfg: &RunConfig, oracle: bool) -> Result<Option<Checkpoint>> {
    if oracle {
        return Ok(None);
    }
    let path = RunConfig::require(&cfg.paths.checkpoint, "checkpoint (--checkpoint, paths.checkpoint or --oracle)")?;
    Ok(Some(load_checkpoint(path)?))
}

pub fn infer(cfg: &RunConfig, oracle: bool) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "dataset (--data or paths.data)")?;
    let out = out_dir(cfg)?;
    let ck = model_source(cfg, oracle)?;
    let precision = ck.as_ref().map_or(Ok(cfg.precision), precision_of)?;
    cfg.write_resolved(out)?;
    let dir = out.join("predictions");
    let (scenes, total) = match precision {
        Precision::F32 => {
            let (m, clouds, preds, _) = predict_typed::<f32>(cfg, ck.as_ref(), data)?;
            let lens: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
            (clouds.len(), write_predictions(&dir, &m, &lens, &preds)?)
        }
        Precision::F64 => {
            let (m, clouds, preds, _) = predict_typed::<f64>(cfg, ck.as_ref(), data)?;
            let lens: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
            (clouds.len(), write_predictions(&dir, &m, &lens, &preds)?)
        }
    };
    println!("scenes={scenes}");
    println!("predictions={total}");
    println!("predictions_dir={}", dir.display());
    eprintln!("wrote {total} predictions for {scenes} scenes");
    Ok(())
}

fn read_predictions(dir: &Path, manifest: &Manifest) -> Result<Vec<Vec<InstancePrediction>>> {
    manifest
        .scenes
        .iter()
        .map(|entry| {
            let path = dir.join(format!("{}.csv", scene_stem(entry)));
            let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            parse_predictions_csv(&text).with_context(|| format!("in {}", path.display()))
        })
        .collect()
}

fn check_masks(preds: &[Vec<InstancePrediction>], lens: &[usize]) -> Result<()> {
    for (k, (p, &n)) in preds.iter().zip(lens).enumerate() {
        if p.iter().any(|q| q.points.last().is_some_and(|&i| i >= n)) {
            bail!(Violation(format!("predictions of scene {k} index points beyond its {n} points")));
        }
    }
    Ok(())
}

fn emit_metrics(out: &Path, report: &MetricsReport, title: &str) -> Result<()> {
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("metrics.svg"), &metrics_bars(report, title))?;
    print!("{}", report.key_values());
    Ok(())
}

fn emit_distance(out: &Path, name: &str, report: &DistanceOverlapReport, title: &str) -> Result<()> {
    write_text(&out.join(format!("{name}.csv")), &report.to_csv())?;
    write_text(&out.join(format!("{name}.svg")), &distance_histogram(report, title))?;
    Ok(())
}

fn eval_typed<T: Real>(cfg: &RunConfig, ck: Option<&Checkpoint>, data: &Path, out: &Path) -> Result<()> {
    let (report, distance) = match &cfg.paths.predictions {
        Some(dir) => {
            let (manifest, clouds) = load_clouds::<T>(data)?;
            let preds = read_predictions(dir, &manifest)?;
            check_masks(&preds, &clouds.iter().map(|c| c.len()).collect::<Vec<_>>())?;
            (evaluate_clouds(&clouds, &preds)?, None)
        }
        None => {
            let (_, clouds, preds, params) = predict_typed::<T>(cfg, ck, data)?;
            let report = evaluate_clouds(&clouds, &preds)?;
            let distance = match &params {
                Some(p) => Some(model_distance_overlap(p, &clouds, cfg.eval.sample_points, cfg.eval.sample_seed, cfg.eval.bins)?),
                None => None,
            };
            (report, distance)
        }
    };
    emit_metrics(out, &report, "Instance metrics")?;
    if let Some(d) = distance {
        emit_distance(out, "distance", &d, "Pairwise embedding distances")?;
        println!("overlap_probability={}", d.overlap_probability);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, oracle: bool) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "dataset (--data or paths.data)")?;
    let out = out_dir(cfg)?;
    let ck = if cfg.paths.predictions.is_some() { None } else { model_source(cfg, oracle)? };
    let precision = ck.as_ref().map_or(Ok(cfg.precision), precision_of)?;
    cfg.write_resolved(out)?;
    match precision {
        Precision::F32 => eval_typed::<f32>(cfg, ck.as_ref(), data, out)?,
        Precision::F64 => eval_typed::<f64>(cfg, ck.as_ref(), data, out)?,
    }
    eprintln!("metrics written to {}", out.join("metrics.csv").display());
    Ok(())
}

fn bench_model<T: Real>(cfg: &RunConfig, path: Option<&PathBuf>, head: HeadKind) -> Result<ModelParams<T>> {
    match path {
        Some(p) => {
            let params = load_checkpoint(p)?.params::<T>(None)?;
            if params.config.head != head {
                bail!(UsageError(format!("{} does not hold a {head:?} model", p.display())));
            }
            Ok(params)
        }
        None => {
            let mc = ModelConfig { head, n_s: cfg.bench.n_s, ..TrainConfig { paradigm: head, ..cfg.train.clone() }.model_config() };
            Ok(ModelParams::init(&mc)?)
        }
    }
}

fn bench_typed<T: Real>(cfg: &RunConfig) -> Result<String> {
    let flatten = bench_model::<T>(cfg, cfg.paths.flatten_checkpoint.as_ref(), HeadKind::Flatten)?;
    let project = bench_model::<T>(cfg, cfg.paths.project_checkpoint.as_ref(), HeadKind::Project)?;
    let spec = icm3d::SceneSpec { total_points: Some(cfg.bench.points), rng_seed: cfg.bench.seed, ..cfg.scene.clone() };
    let cloud = generate_scene::<T>(&spec)?;
    let mut icfg = cfg.infer.clone();
    icfg.pre_nms_top_k = icfg.pre_nms_top_k.or(Some(cfg.bench.pre_nms_top_k));
    let r = latency_bench(&flatten, &project, &[cloud], cfg.bench.repeats, &icfg)?;
    let mut s = String::new();
    let _ = writeln!(s, "n_points={}", r.n_points);
    let _ = writeln!(s, "n_s={}", r.n_s);
    let _ = writeln!(s, "repeats={}", r.repeats);
    let _ = writeln!(s, "flatten_ms={}", r.flatten_ms);
    let _ = writeln!(s, "project_ms={}", r.project_ms);
    if let (Some(f), Some(p)) = (r.flatten_peak_bytes, r.project_peak_bytes) {
        let _ = writeln!(s, "flatten_peak_bytes={f}");
        let _ = writeln!(s, "project_peak_bytes={p}");
    }
    let _ = writeln!(s, "ratio={}", r.ratio);
    let _ = writeln!(s, "flatten/project: {}", r.ratio);
    Ok(s)
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let text = match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg)?,
        Precision::F64 => bench_typed::<f64>(cfg)?,
    };
    if let Some(out) = &cfg.paths.out {
        cfg.write_resolved(out)?;
        let csv: String = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .fold(String::from("metric,value\n"), |acc, (k, v)| acc + k + "," + v + "\n");
        write_text(&out.join("bench.csv"), &csv)?;
    }
    print!("{text}");
    Ok(())
}

struct ArmResult {
    report: MetricsReport,
    distance: DistanceOverlapReport,
}

fn run_arm<T: Real>(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    train: &[PointCloud<T>],
    test: &[PointCloud<T>],
    threads: usize,
    dir: &Path,
) -> Result<ArmResult> {
    let mut trainer = Trainer::new(train_cfg, train)?.with_threads(threads)?;
    let total = trainer.total_steps();
    let every = (total / 10).max(1);
    while !trainer.is_done() {
        trainer.run_until(trainer.step() + every)?;
        eprintln!("{:?} step {}/{total}", train_cfg.paradigm, trainer.step());
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    trainer.checkpoint()?.save(&dir.join("checkpoint.json"))?;
    write_text(&dir.join("train_log.csv"), &trainer.log().to_csv())?;
    let preds = model_predictions(trainer.params(), test, &cfg.infer)?;
    let report = evaluate_clouds(test, &preds)?;
    let distance =
        model_distance_overlap(trainer.params(), test, cfg.eval.sample_points, cfg.eval.sample_seed, cfg.eval.bins)?;
    Ok(ArmResult { report, distance })
}

fn compare_typed<T: Real>(cfg: &RunConfig, threads: usize) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "dataset (--data or paths.data)")?;
    let out = out_dir(cfg)?;
    if cfg.train.paradigm == HeadKind::Discriminative {
        bail!(UsageError("train.paradigm must be flatten or project; the discriminative arm is added".into()));
    }
    let (_, train) = load_clouds::<T>(data)?;
    let test = match &cfg.paths.test_data {
        Some(dir) => load_clouds::<T>(dir)?.1,
        None => train.clone(),
    };
    cfg.write_resolved(out)?;
    let disc_cfg = TrainConfig { paradigm: HeadKind::Discriminative, ..cfg.train.clone() };
    let icm = run_arm(cfg, &cfg.train, &train, &test, threads, &out.join("icm"))?;
    let disc = run_arm(cfg, &disc_cfg, &train, &test, threads, &out.join("discriminative"))?;

    let mut joint = String::from("arm,bin_lo,bin_hi,intra,inter\n");
    for (name, r) in [("icm", &icm.distance), ("discriminative", &disc.distance)] {
        for line in r.to_csv().lines().skip(1) {
            let _ = writeln!(joint, "{name},{line}");
        }
    }
    write_text(&out.join("distance.csv"), &joint)?;
    emit_distance(out, "distance_icm", &icm.distance, "Cube-category distances")?;
    emit_distance(out, "distance_discriminative", &disc.distance, "Discriminative embedding distances")?;

    let mut table = String::from("metric,icm,discriminative\n");
    let rows = |r: &ArmResult| -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = r
            .report
            .to_csv()
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with("class"))
            .filter_map(|l| l.split_once(',').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        v.push(("overlap_probability".into(), r.distance.overlap_probability.to_string()));
        v
    };
    for ((k, a), (_, b)) in rows(&icm).into_iter().zip(rows(&disc)) {
        let _ = writeln!(table, "{k},{a},{b}");
        println!("icm_{k}={a}");
        println!("discriminative_{k}={b}");
    }
    write_text(&out.join("compare.csv"), &table)?;
    eprintln!(
        "overlap probability: cube head {:.4}, discriminative {:.4}",
        icm.distance.overlap_probability, disc.distance.overlap_probability
    );
    Ok(())
}

pub fn compare_baseline(cfg: &RunConfig, threads: usize) -> Result<()> {
    match cfg.precision {
        Precision::F32 => compare_typed::<f32>(cfg, threads),
        Precision::F64 => compare_typed::<f64>(cfg, threads),
    }
}
