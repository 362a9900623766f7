//! Experiment orchestration: the synthetic benchmark, metric records, the
//! ablation/sweep/comparison tables and the loss-scatter analysis.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use crate::segnet::{build_unet, dice_score, train_source, SegNet, UNetConfig, DICE_EPS};
use crate::svg::{ScatterPlot, Series};
use crate::synth::{clip_normalize, generate_sample, AugmentSpec, DomainSpec, IntensityMap, Sample};
use crate::uda::{
    adapt, baseline_discriminator_adapt, baseline_pseudo_only, build_discriminator,
    gen_discriminator_corpus, test_time_predict, train_discriminator, AdaptConfig, TeacherBundle,
};
use crate::vae::{build_vae, train_vae, ShapeVae, VaeConfig};
use crate::volume::Volume;

/// Per-method evaluation result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub method: String,
    pub per_case: Vec<f32>,
    pub mean_dice: f32,
    pub domain_gap: Option<f32>,
}

impl MetricsRecord {
    pub fn new(method: &str, per_case: Vec<f32>) -> MetricsRecord {
        let mean_dice = if per_case.is_empty() {
            0.0
        } else {
            per_case.iter().sum::<f32>() / per_case.len() as f32
        };
        MetricsRecord { method: method.to_string(), per_case, mean_dice, domain_gap: None }
    }
}

/// Mean Dice of binary predictions against binary ground truths.
pub fn mean_dice(method: &str, preds: &[Volume], gts: &[Volume]) -> Result<MetricsRecord> {
    if preds.len() != gts.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let per_case = preds.iter().zip(gts).map(|(p, g)| dice_score(p, g)).collect();
    Ok(MetricsRecord::new(method, per_case))
}

/// Fill in `domain_gap = upper_bound - mean_dice` for every record.
pub fn apply_domain_gap(records: &mut [MetricsRecord], upper_bound: f32) {
    for r in records.iter_mut() {
        r.domain_gap = Some(upper_bound - r.mean_dice);
    }
}

// ---- benchmark datasets ----

/// Appearance of the labeled source domain (clean, mild texture).
pub fn source_domain(seed: u64) -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        intensity: IntensityMap { foreground: 90.0, background: -70.0 },
        noise_sigma: 20.0,
        texture_frequency: 0.2,
        spacing: (1.0, 1.0, 1.0),
        seed: crate::rng::derive_seed(seed, "source-domain"),
    }
}

/// Appearance of the unlabeled target domain (shifted intensities, more
/// noise, coarser texture). The mask distribution is shared with the
/// source domain by construction.
pub fn target_domain(seed: u64) -> DomainSpec {
    DomainSpec {
        name: "target".into(),
        intensity: IntensityMap { foreground: 160.0, background: -20.0 },
        noise_sigma: 39.75,
        texture_frequency: 0.46,
        spacing: (1.0, 1.0, 1.0),
        seed: crate::rng::derive_seed(seed, "target-domain"),
    }
}

/// Number of samples per split.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BenchmarkSizes {
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub grid: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes { source_train: 60, source_test: 20, target_train: 40, target_test: 20, grid: 32 }
    }
}

/// The four benchmark splits. Target-train masks exist (the data is
/// synthetic) but the adaptation methods only ever see the images; the
/// labels are used solely by the supervised upper bound.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub source_train: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

impl BenchmarkData {
    /// Images-only view of the target training split.
    pub fn target_train_images(&self) -> Vec<(String, Volume)> {
        self.target_train
            .iter()
            .map(|s| (s.case_id.clone(), s.image.clone()))
            .collect()
    }
}

fn gen_split(domain: &DomainSpec, base: u64, count: usize, grid: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let s = generate_sample(base + i as u64, domain, (grid, grid, grid))?;
            Ok(Sample { image: clip_normalize(&s.image)?, ..s })
        })
        .collect()
}

/// Generate all four splits in memory. Shape-seed bases are disjoint
/// across splits so no shape appears twice.
pub fn generate_benchmark(seed: u64, sizes: &BenchmarkSizes) -> Result<BenchmarkData> {
    let src = source_domain(seed);
    let tgt = target_domain(seed);
    let g = sizes.grid;
    Ok(BenchmarkData {
        source_train: gen_split(&src, 1000, sizes.source_train, g)?,
        source_test: gen_split(&src, 2000, sizes.source_test, g)?,
        target_train: gen_split(&tgt, 3000, sizes.target_train, g)?,
        target_test: gen_split(&tgt, 4000, sizes.target_test, g)?,
    })
}

// ---- pipeline training ----

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub unet: UNetConfig,
    pub vae: VaeConfig,
    pub source_iters: usize,
    pub source_lr: f32,
    pub vae_iters: usize,
    pub vae_lr: f32,
    pub adapt: AdaptConfig,
    pub augment: AugmentSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            unet: UNetConfig::default(),
            vae: VaeConfig::default(),
            source_iters: 400,
            source_lr: 1e-2,
            vae_iters: 2000,
            vae_lr: 1e-2,
            adapt: AdaptConfig::default(),
            augment: AugmentSpec::default(),
        }
    }
}

/// Train the source segmenter and the shape VAE, returning the frozen
/// teacher bundle.
pub fn train_pipeline(bench: &BenchmarkData, cfg: &PipelineConfig, seed: u64) -> Result<TeacherBundle> {
    let seg = train_source_net(bench, cfg, seed)?;
    let vae = train_shape_vae(bench, cfg, seed)?;
    Ok(TeacherBundle { seg, vae })
}

pub fn train_source_net(bench: &BenchmarkData, cfg: &PipelineConfig, seed: u64) -> Result<SegNet> {
    let mut net = build_unet(&cfg.unet, seed)?;
    let mut rng = derive_rng(seed, "source-train");
    train_source(&mut net, &bench.source_train, cfg.source_iters, cfg.source_lr, &cfg.augment, &mut rng)?;
    Ok(net)
}

pub fn train_shape_vae(bench: &BenchmarkData, cfg: &PipelineConfig, seed: u64) -> Result<ShapeVae> {
    let mut vae = build_vae(&cfg.vae, seed)?;
    let masks: Vec<Volume> = bench.source_train.iter().map(|s| s.mask.clone()).collect();
    let mut rng = derive_rng(seed, "vae-train");
    train_vae(&mut vae, &masks, cfg.vae_iters, cfg.vae_lr, &mut rng)?;
    Ok(vae)
}

/// Plain predictions on a labeled split.
pub fn evaluate_net(method: &str, net: &SegNet, test: &[Sample]) -> Result<MetricsRecord> {
    let per_case = test
        .iter()
        .map(|s| Ok(dice_score(&net.predict_mask(&s.image, 0.5)?, &s.mask)))
        .collect::<Result<Vec<f32>>>()?;
    Ok(MetricsRecord::new(method, per_case))
}

/// Predictions with the one-step test-time update per case.
pub fn evaluate_ttt(
    method: &str,
    bundle: &TeacherBundle,
    net: &SegNet,
    test: &[Sample],
    cfg: &AdaptConfig,
) -> Result<MetricsRecord> {
    let per_case = test
        .iter()
        .map(|s| Ok(dice_score(&test_time_predict(bundle, net, &s.image, cfg)?, &s.mask)))
        .collect::<Result<Vec<f32>>>()?;
    Ok(MetricsRecord::new(method, per_case))
}

fn fresh_student(bundle: &TeacherBundle) -> SegNet {
    bundle.seg.clone()
}

/// Component ablation (six rows): direct test, pseudo-only, recon-only,
/// pseudo+recon, +dynamic weighting, +test-time training. Every adapted
/// row starts from a fresh copy of the source segmenter and uses the same
/// sampling stream, so rows differ only in the objective.
pub fn run_ablation(
    bench: &BenchmarkData,
    bundle: &TeacherBundle,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let targets = bench.target_train_images();
    let test = &bench.target_test;
    let mut rows = Vec::new();

    rows.push(evaluate_net("direct test", &bundle.seg, test)?);

    let mut student = fresh_student(bundle);
    baseline_pseudo_only(bundle, &mut student, &targets, &cfg.adapt, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("pseudo only", &student, test)?);

    let recon_cfg = AdaptConfig { pseudo_enabled: false, dynamic_enabled: false, ..cfg.adapt.clone() };
    let mut student = fresh_student(bundle);
    adapt(bundle, &mut student, &targets, &recon_cfg, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("recon only", &student, test)?);

    let both_cfg = AdaptConfig { dynamic_enabled: false, ..cfg.adapt.clone() };
    let mut student = fresh_student(bundle);
    adapt(bundle, &mut student, &targets, &both_cfg, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("pseudo + recon", &student, test)?);

    let dyn_cfg = AdaptConfig { dynamic_enabled: true, ..cfg.adapt.clone() };
    let mut student = fresh_student(bundle);
    adapt(bundle, &mut student, &targets, &dyn_cfg, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("+ dynamic lambda", &student, test)?);

    rows.push(evaluate_ttt("+ test-time training", bundle, &student, test, &dyn_cfg)?);
    Ok(rows)
}

/// Reconstruction-weight sweep with dynamic weighting and test-time
/// training disabled.
pub fn run_lambda_sweep(
    bench: &BenchmarkData,
    bundle: &TeacherBundle,
    cfg: &PipelineConfig,
    lambdas: &[f32],
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let targets = bench.target_train_images();
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let sweep_cfg = AdaptConfig {
            lambda_vae_hat: lambda,
            dynamic_enabled: false,
            ttt_enabled: false,
            ..cfg.adapt.clone()
        };
        let mut student = fresh_student(bundle);
        adapt(bundle, &mut student, &targets, &sweep_cfg, &mut derive_rng(seed, "adapt"))?;
        rows.push(evaluate_net(&format!("lambda={lambda}"), &student, &bench.target_test)?);
    }
    Ok(rows)
}

/// Method comparison: direct test, pseudo-label self-training, the
/// discriminator baseline, the full VAE pipeline, and the supervised
/// upper bound (fine-tuning on target labels). Domain gap is measured
/// against the upper bound.
pub fn run_comparison(
    bench: &BenchmarkData,
    bundle: &TeacherBundle,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let targets = bench.target_train_images();
    let test = &bench.target_test;
    let mut rows = Vec::new();

    rows.push(evaluate_net("direct test", &bundle.seg, test)?);

    let mut student = fresh_student(bundle);
    baseline_pseudo_only(bundle, &mut student, &targets, &cfg.adapt, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("pseudo label", &student, test)?);

    let corpus = gen_discriminator_corpus(
        &bench.source_train,
        &cfg.unet,
        cfg.source_iters,
        cfg.source_lr,
        &cfg.augment,
        seed,
    )?;
    let grid = bench.source_train[0].mask.dims().0;
    let mut disc = build_discriminator(&[4, 8, 16], grid, seed)?;
    train_discriminator(&mut disc, &corpus, cfg.vae_iters.min(600), cfg.source_lr, &mut derive_rng(seed, "disc-train"))?;
    let mut student = fresh_student(bundle);
    baseline_discriminator_adapt(bundle, &disc, &mut student, &targets, &cfg.adapt, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_net("discriminator", &student, test)?);

    let full_cfg = AdaptConfig { dynamic_enabled: true, ttt_enabled: true, ..cfg.adapt.clone() };
    let mut student = fresh_student(bundle);
    adapt(bundle, &mut student, &targets, &full_cfg, &mut derive_rng(seed, "adapt"))?;
    rows.push(evaluate_ttt("vae pipeline", bundle, &student, test, &full_cfg)?);

    let mut upper = fresh_student(bundle);
    train_source(
        &mut upper,
        &bench.target_train,
        cfg.source_iters,
        cfg.source_lr,
        &cfg.augment,
        &mut derive_rng(seed, "upper-bound"),
    )?;
    let upper_row = evaluate_net("upper bound", &upper, test)?;
    let ub = upper_row.mean_dice;
    rows.push(upper_row);
    apply_domain_gap(&mut rows, ub);
    Ok(rows)
}

// ---- loss-scatter analysis ----

/// One point per case per mask source in (L_pseudo, L_recon) space.
#[derive(Debug, Clone)]
pub struct ScatterData {
    /// series name -> (case id, L_pseudo, L_recon)
    pub series: Vec<(String, Vec<(String, f32, f32)>)>,
    pub pred_gt_centroid_dist: f32,
    pub pseudo_gt_centroid_dist: f32,
}

fn soft_dice_loss(a: &Volume, b: &Volume) -> f32 {
    let inter: f32 = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).sum();
    let sa: f32 = a.data().iter().sum();
    let sb: f32 = b.data().iter().sum();
    -(2.0 * inter + DICE_EPS) / (sa + sb + DICE_EPS)
}

fn centroid(points: &[(String, f32, f32)]) -> (f32, f32) {
    let n = points.len().max(1) as f32;
    (
        points.iter().map(|p| p.1).sum::<f32>() / n,
        points.iter().map(|p| p.2).sum::<f32>() / n,
    )
}

/// For every test case, evaluate (L_pseudo, L_recon) of three candidate
/// masks: the teacher's pseudo label, the ground truth, and the adapted
/// model's prediction. L_pseudo is the Dice loss against the teacher's
/// soft prediction; L_recon is the frozen VAE's reconstruction loss.
pub fn loss_scatter(
    bundle: &TeacherBundle,
    student: &SegNet,
    target_test: &[Sample],
) -> Result<ScatterData> {
    let mut pseudo = Vec::new();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for s in target_test {
        let teacher_soft = bundle.seg.predict_soft(&s.image)?;
        let pseudo_mask = teacher_soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 })?;
        let pred_mask = student.predict_mask(&s.image, 0.5)?;
        for (mask, out) in [
            (&pseudo_mask, &mut pseudo),
            (&s.mask, &mut gt),
            (&pred_mask, &mut pred),
        ] {
            let lp = soft_dice_loss(mask, &teacher_soft);
            let lr = bundle.vae.recon_loss(mask)?;
            out.push((s.case_id.clone(), lp, lr));
        }
    }
    let cg = centroid(&gt);
    let cp = centroid(&pred);
    let cl = centroid(&pseudo);
    let dist = |a: (f32, f32), b: (f32, f32)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    Ok(ScatterData {
        series: vec![
            ("pseudo label".into(), pseudo),
            ("ground truth".into(), gt),
            ("predicted".into(), pred),
        ],
        pred_gt_centroid_dist: dist(cp, cg),
        pseudo_gt_centroid_dist: dist(cl, cg),
    })
}

// ---- no-ground-truth quality estimation ----

/// Degrade a binary mask towards a target Dice level against the original
/// by eroding/dilating boundary voxels and flipping random voxels.
/// Returns the corrupted mask and its actual Dice against the original.
pub fn corrupt_to_level(mask: &Volume, target_dice: f32, rng: &mut ChaCha8Rng) -> Result<(Volume, f32)> {
    use rand::Rng;
    let (d, h, w) = mask.dims();
    let orig = mask.data();
    let mut data = orig.to_vec();
    let sum_orig: f64 = orig.iter().map(|&v| v as f64).sum();
    let mut sum_cur = sum_orig;
    let mut inter = sum_orig;
    let dice = |inter: f64, sum_cur: f64| (2.0 * inter / (sum_cur + sum_orig).max(1e-9)) as f32;
    let neighbor_differs = |data: &[f32], z: usize, y: usize, x: usize| -> bool {
        let v = data[(z * h + y) * w + x];
        let mut out = false;
        for (dz, dy, dx) in [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
            if nz >= 0 && ny >= 0 && nx >= 0 && (nz as usize) < d && (ny as usize) < h && (nx as usize) < w {
                out |= data[((nz as usize) * h + ny as usize) * w + nx as usize] != v;
            }
        }
        out
    };
    let mut guard = 0;
    while dice(inter, sum_cur) > target_dice && guard < 4_000_000 {
        guard += 1;
        let (z, y, x) = (rng.gen_range(0..d), rng.gen_range(0..h), rng.gen_range(0..w));
        let idx = (z * h + y) * w + x;
        // boundary erosion/dilation with a little salt noise
        if neighbor_differs(&data, z, y, x) || rng.gen_bool(0.05) {
            let was_fg = data[idx] == 1.0;
            data[idx] = 1.0 - data[idx];
            sum_cur += if was_fg { -1.0 } else { 1.0 };
            if orig[idx] == 1.0 {
                inter += if was_fg { -1.0 } else { 1.0 };
            }
        }
    }
    let actual = dice(inter, sum_cur);
    let vol = Volume::new(1, (d, h, w), mask.spacing(), data)?;
    Ok((vol, actual))
}

/// Masks corrupted to the Dice levels {1.0, 0.9, ..., 0.3} against each
/// input mask, paired with their actual Dice.
pub fn corruption_suite(masks: &[Volume], rng: &mut ChaCha8Rng) -> Result<Vec<(Volume, f32)>> {
    let mut suite = Vec::new();
    for mask in masks {
        for level in [1.0f32, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3] {
            suite.push(corrupt_to_level(mask, level, rng)?);
        }
    }
    Ok(suite)
}

fn ranks(values: &[f32]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (ties get average ranks).
pub fn spearman(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

// ---- output writers ----

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Summary CSV: one row per method. The human-readable table built by
/// [`format_metrics_table`] renders the identical strings.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("method,mean_dice,domain_gap\r\n");
    for r in records {
        let gap = r.domain_gap.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\r\n", csv_field(&r.method), r.mean_dice, gap));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-case CSV: one row per (method, case).
pub fn write_per_case_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("method,case_index,dice\r\n");
    for r in records {
        for (i, d) in r.per_case.iter().enumerate() {
            out.push_str(&format!("{},{},{}\r\n", csv_field(&r.method), i, d));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn format_metrics_table(records: &[MetricsRecord]) -> String {
    let width = records.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}  {:>12}  {:>12}\n", "method", "mean_dice", "domain_gap");
    for r in records {
        let gap = r.domain_gap.map(|g| g.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:width$}  {:>12}  {:>12}\n",
            r.method,
            r.mean_dice.to_string(),
            gap
        ));
    }
    out
}

/// Adaptation log CSV with the loss components per iteration.
pub fn write_adapt_log_csv(path: &Path, log: &[crate::uda::AdaptRecord]) -> Result<()> {
    let mut out = String::from("iter,L_recon,L_pseudo,λ_recon,total\r\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\r\n",
            r.iter, r.l_recon, r.l_pseudo, r.lambda_recon, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_scatter_csv(path: &Path, data: &ScatterData) -> Result<()> {
    let mut out = String::from("series,case,L_pseudo,L_recon\r\n");
    for (name, points) in &data.series {
        for (case, lp, lr) in points {
            out.push_str(&format!("{},{},{},{}\r\n", csv_field(name), csv_field(case), lp, lr));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_scatter_svg(path: &Path, data: &ScatterData) -> Result<()> {
    let plot = ScatterPlot {
        title: "Loss distribution by mask source".into(),
        x_label: "L_pseudo".into(),
        y_label: "L_recon".into(),
        series: data
            .series
            .iter()
            .map(|(name, points)| Series {
                name: name.clone(),
                points: points.iter().map(|p| (p.1, p.2)).collect(),
            })
            .collect(),
    };
    std::fs::write(path, plot.render())?;
    Ok(())
}

/// Deterministic RNG for evaluation phases, exposed so callers replay the
/// exact stream recorded in a manifest.
pub fn eval_rng(seed: u64, phase: &str) -> ChaCha8Rng {
    derive_rng(seed, phase)
}
