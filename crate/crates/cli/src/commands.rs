//! One function per subcommand. Each command writes its outputs plus a
//! run manifest under the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use vuda_core::eval::{
    evaluate_net, format_metrics_table, loss_scatter, run_ablation, run_comparison,
    run_lambda_sweep, source_domain, target_domain, write_adapt_log_csv, write_metrics_csv,
    write_per_case_csv, write_scatter_csv, write_scatter_svg, BenchmarkData, MetricsRecord,
};
use vuda_core::manifest::RunManifest;
use vuda_core::rng::derive_rng;
use vuda_core::segnet::{build_unet, train_source, SegNet, UNetConfig};
use vuda_core::synth::{generate_dataset, load_dataset, DomainSpec};
use vuda_core::uda::{adapt, test_time_predict, TeacherBundle};
use vuda_core::vae::{build_vae, train_vae, ShapeVae, VaeConfig};
use vuda_core::{read_volume, write_volume};

use crate::config::Settings;

pub struct Ctx {
    pub settings: Settings,
    pub seed: u64,
    pub out: PathBuf,
}

/// Shape-seed bases per split; disjoint so no phantom repeats.
const SPLIT_BASES: [(&str, u64); 4] =
    [("source-train", 1000), ("source-test", 2000), ("target-train", 3000), ("target-test", 4000)];

impl Ctx {
    fn data_root(&self) -> PathBuf {
        self.settings.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, self.seed);
        for (k, v) in self.settings.snapshot() {
            m.record(&k, v);
        }
        m.dataset_seeds = SPLIT_BASES.iter().map(|&(_, b)| b).collect();
        m
    }

    fn save_manifest(&self, m: &RunManifest) -> anyhow::Result<()> {
        let dir = self.out.join("manifests");
        std::fs::create_dir_all(&dir)?;
        m.save(&dir.join(format!("{}.json", m.command)))?;
        Ok(())
    }

    fn split_domain(&self, split: &str) -> DomainSpec {
        let base = if split.starts_with("source") {
            source_domain(self.seed)
        } else {
            target_domain(self.seed)
        };
        DomainSpec { name: split.to_string(), ..base }
    }

    /// All four splits, loaded from disk.
    fn load_benchmark(&self) -> anyhow::Result<BenchmarkData> {
        let root = self.data_root();
        let load = |split: &str| {
            load_dataset(&root, split)
                .with_context(|| format!("loading split `{split}` from {:?} (run gen-data first)", root))
        };
        Ok(BenchmarkData {
            source_train: load("source-train")?,
            source_test: load("source-test")?,
            target_train: load("target-train")?,
            target_test: load("target-test")?,
        })
    }

    fn save_segnet(&self, name: &str, net: &SegNet) -> anyhow::Result<()> {
        let dir = self.models_dir();
        std::fs::create_dir_all(&dir)?;
        net.params.save(dir.join(format!("{name}.vckp")))?;
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&net.config)?)?;
        Ok(())
    }

    fn load_segnet(&self, name: &str) -> anyhow::Result<SegNet> {
        let dir = self.models_dir();
        let cfg_path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&cfg_path)
            .with_context(|| format!("missing model config {:?} (train it first)", cfg_path))?;
        let config: UNetConfig = serde_json::from_str(&text)?;
        let mut net = build_unet(&config, 0)?;
        net.params = vuda_core::ParamStore::load(dir.join(format!("{name}.vckp")))?;
        Ok(net)
    }

    fn save_vae(&self, vae: &ShapeVae) -> anyhow::Result<()> {
        let dir = self.models_dir();
        std::fs::create_dir_all(&dir)?;
        vae.params.save(dir.join("vae.vckp"))?;
        std::fs::write(dir.join("vae.json"), serde_json::to_string_pretty(&vae.config)?)?;
        Ok(())
    }

    fn load_vae(&self) -> anyhow::Result<ShapeVae> {
        let dir = self.models_dir();
        let cfg_path = dir.join("vae.json");
        let text = std::fs::read_to_string(&cfg_path)
            .with_context(|| format!("missing VAE config {:?} (run train-vae first)", cfg_path))?;
        let config: VaeConfig = serde_json::from_str(&text)?;
        let mut vae = build_vae(&config, 0)?;
        vae.params = vuda_core::ParamStore::load(dir.join("vae.vckp"))?;
        Ok(vae)
    }

    fn load_bundle(&self) -> anyhow::Result<TeacherBundle> {
        Ok(TeacherBundle { seg: self.load_segnet("source")?, vae: self.load_vae()? })
    }

    fn emit_table(&self, name: &str, rows: &[MetricsRecord]) -> anyhow::Result<()> {
        print!("{}", format_metrics_table(rows));
        let dir = self.out.join("tables");
        std::fs::create_dir_all(&dir)?;
        write_metrics_csv(&dir.join(format!("{name}.csv")), rows)?;
        write_per_case_csv(&dir.join(format!("{name}_per_case.csv")), rows)?;
        println!("wrote {:?}", dir.join(format!("{name}.csv")));
        Ok(())
    }
}

pub fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let root = ctx.data_root();
    let g = ctx.settings.sizes.grid;
    let mut m = ctx.manifest("gen-data");
    let t0 = Instant::now();
    for (split, base) in SPLIT_BASES {
        let count = match split {
            "source-train" => ctx.settings.sizes.source_train,
            "source-test" => ctx.settings.sizes.source_test,
            "target-train" => ctx.settings.sizes.target_train,
            _ => ctx.settings.sizes.target_test,
        };
        // masks are written for every split: the data is synthetic, and
        // target labels are only read by evaluation and the upper bound
        let manifest = generate_dataset(&root, &ctx.split_domain(split), base, count, (g, g, g), true)?;
        println!("{split}: {} cases under {:?}", manifest.cases.len(), root.join(split));
    }
    m.record_timing("gen-data", t0.elapsed().as_secs_f64());
    ctx.save_manifest(&m)
}

pub fn train_source_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let data = load_dataset(&ctx.data_root(), "source-train")
        .context("loading source-train (run gen-data first)")?;
    let p = &ctx.settings.pipeline;
    let mut net = build_unet(&p.unet, ctx.seed)?;
    let mut rng = derive_rng(ctx.seed, "source-train");
    let t0 = Instant::now();
    let curve = train_source(&mut net, &data, p.source_iters, p.source_lr, &p.augment, &mut rng)?;
    let secs = t0.elapsed().as_secs_f64();
    ctx.save_segnet("source", &net)?;
    let mut csv = String::from("iter,loss\r\n");
    for r in &curve {
        csv.push_str(&format!("{},{}\r\n", r.iter, r.loss));
    }
    std::fs::create_dir_all(ctx.out.join("tables"))?;
    std::fs::write(ctx.out.join("tables/source_curve.csv"), csv)?;
    println!(
        "trained source segmenter: {} iters in {:.1}s, final loss {:.4}",
        curve.len(),
        secs,
        curve.last().map(|r| r.loss).unwrap_or(f32::NAN)
    );
    let mut m = ctx.manifest("train-source");
    m.record_timing("train-source", secs);
    ctx.save_manifest(&m)
}

pub fn train_vae_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let data = load_dataset(&ctx.data_root(), "source-train")
        .context("loading source-train (run gen-data first)")?;
    let masks: Vec<_> = data.iter().map(|s| s.mask.clone()).collect();
    let p = &ctx.settings.pipeline;
    let mut vae = build_vae(&p.vae, ctx.seed)?;
    let mut rng = derive_rng(ctx.seed, "vae-train");
    let t0 = Instant::now();
    let curve = train_vae(&mut vae, &masks, p.vae_iters, p.vae_lr, &mut rng)?;
    let secs = t0.elapsed().as_secs_f64();
    ctx.save_vae(&vae)?;
    let mut csv = String::from("iter,loss,dice_term,kl_term\r\n");
    for r in &curve {
        csv.push_str(&format!("{},{},{},{}\r\n", r.iter, r.loss, r.dice_term, r.kl_term));
    }
    std::fs::create_dir_all(ctx.out.join("tables"))?;
    std::fs::write(ctx.out.join("tables/vae_curve.csv"), csv)?;
    println!(
        "trained shape VAE: {} iters in {:.1}s, final loss {:.4}",
        curve.len(),
        secs,
        curve.last().map(|r| r.loss).unwrap_or(f32::NAN)
    );
    let mut m = ctx.manifest("train-vae");
    m.record_timing("train-vae", secs);
    ctx.save_manifest(&m)
}

pub fn adapt_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let bundle = ctx.load_bundle()?;
    let targets = vuda_core::synth::load_images(&ctx.data_root(), "target-train")
        .context("loading target-train images (run gen-data first)")?;
    let mut student = bundle.seg.clone();
    let mut rng = derive_rng(ctx.seed, "adapt");
    let t0 = Instant::now();
    let log = adapt(&bundle, &mut student, &targets, &ctx.settings.pipeline.adapt, &mut rng)?;
    let secs = t0.elapsed().as_secs_f64();
    ctx.save_segnet("adapted", &student)?;
    std::fs::create_dir_all(ctx.out.join("tables"))?;
    write_adapt_log_csv(&ctx.out.join("tables/adapt_log.csv"), &log)?;
    println!(
        "adapted student: {} iters in {:.1}s, final total loss {:.4}",
        log.len(),
        secs,
        log.last().map(|r| r.total).unwrap_or(f32::NAN)
    );
    let mut m = ctx.manifest("adapt");
    m.record_timing("adapt", secs);
    ctx.save_manifest(&m)
}

pub fn predict_cmd(
    ctx: &Ctx,
    image: &Path,
    output: Option<&Path>,
    model: &str,
    ttt: bool,
) -> anyhow::Result<()> {
    let img = read_volume(image).with_context(|| format!("reading {:?}", image))?;
    let net = ctx.load_segnet(model)?;
    let mask = if ttt {
        let bundle = ctx.load_bundle()?;
        test_time_predict(&bundle, &net, &img, &ctx.settings.pipeline.adapt)?
    } else {
        net.predict_mask(&img, 0.5)?
    };
    let default_out = ctx.out.join("predictions").join(
        image
            .file_stem()
            .map(|s| format!("{}.msk.vuda", s.to_string_lossy()))
            .unwrap_or_else(|| "prediction.msk.vuda".into()),
    );
    let out_path = output.map(Path::to_path_buf).unwrap_or(default_out);
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_volume(&out_path, &mask)?;
    println!("wrote {:?} (foreground fraction {:.4})", out_path, mask.foreground_fraction());
    ctx.save_manifest(&ctx.manifest("predict"))
}

pub fn eval_cmd(ctx: &Ctx, split: &str, model: &str) -> anyhow::Result<()> {
    if !SPLIT_BASES.iter().any(|&(s, _)| s == split) {
        bail!("unknown split `{split}`; expected one of source-train, source-test, target-train, target-test");
    }
    let data = load_dataset(&ctx.data_root(), split)?;
    let net = ctx.load_segnet(model)?;
    let row = evaluate_net(&format!("{model} on {split}"), &net, &data)?;
    ctx.emit_table("eval", &[row])?;
    ctx.save_manifest(&ctx.manifest("eval"))
}

pub fn ablate_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = ctx.load_benchmark()?;
    let bundle = ctx.load_bundle()?;
    let t0 = Instant::now();
    let rows = run_ablation(&bench, &bundle, &ctx.settings.pipeline, ctx.seed)?;
    ctx.emit_table("ablation", &rows)?;
    let mut m = ctx.manifest("ablate");
    m.record_timing("ablate", t0.elapsed().as_secs_f64());
    ctx.save_manifest(&m)
}

pub fn sweep_lambda_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = ctx.load_benchmark()?;
    let bundle = ctx.load_bundle()?;
    let t0 = Instant::now();
    let rows = run_lambda_sweep(&bench, &bundle, &ctx.settings.pipeline, &ctx.settings.lambdas, ctx.seed)?;
    ctx.emit_table("lambda_sweep", &rows)?;
    let mut m = ctx.manifest("sweep-lambda");
    m.record_timing("sweep-lambda", t0.elapsed().as_secs_f64());
    ctx.save_manifest(&m)
}

pub fn compare_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = ctx.load_benchmark()?;
    let bundle = ctx.load_bundle()?;
    let t0 = Instant::now();
    let rows = run_comparison(&bench, &bundle, &ctx.settings.pipeline, ctx.seed)?;
    ctx.emit_table("comparison", &rows)?;
    let mut m = ctx.manifest("compare");
    m.record_timing("compare", t0.elapsed().as_secs_f64());
    ctx.save_manifest(&m)
}

pub fn analyze_losses_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = ctx.load_benchmark()?;
    let bundle = ctx.load_bundle()?;
    let student = ctx
        .load_segnet("adapted")
        .context("analyze-losses needs an adapted model (run adapt first)")?;
    let data = loss_scatter(&bundle, &student, &bench.target_test)?;
    let dir = ctx.out.join("tables");
    std::fs::create_dir_all(&dir)?;
    write_scatter_csv(&dir.join("loss_scatter.csv"), &data)?;
    write_scatter_svg(&dir.join("loss_scatter.svg"), &data)?;
    println!(
        "centroid distance to ground truth: predicted {:.4}, pseudo label {:.4}",
        data.pred_gt_centroid_dist, data.pseudo_gt_centroid_dist
    );
    println!("wrote {:?} and {:?}", dir.join("loss_scatter.csv"), dir.join("loss_scatter.svg"));
    ctx.save_manifest(&ctx.manifest("analyze-losses"))
}
