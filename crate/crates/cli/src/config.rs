//! Config file schema: every key is optional and falls back to the desk
//! defaults. See the README for the full list.

use std::path::{Path, PathBuf};

use vuda_core::eval::{BenchmarkSizes, PipelineConfig};
use vuda_core::manifest::ConfigFile;
use vuda_core::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct Settings {
    pub sizes: BenchmarkSizes,
    pub pipeline: PipelineConfig,
    pub lambdas: Vec<f32>,
    pub data_dir: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| CoreError::Data(format!("config key `{key}`: bad entry `{t}`")))
        })
        .collect()
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let mut cfg = match path {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut sizes = BenchmarkSizes::default();
        sizes.grid = cfg.get_usize("grid", sizes.grid)?;
        sizes.source_train = cfg.get_usize("source_train", sizes.source_train)?;
        sizes.source_test = cfg.get_usize("source_test", sizes.source_test)?;
        sizes.target_train = cfg.get_usize("target_train", sizes.target_train)?;
        sizes.target_test = cfg.get_usize("target_test", sizes.target_test)?;

        let mut p = PipelineConfig::default();
        p.unet.depth = cfg.get_usize("unet_depth", p.unet.depth)?;
        p.unet.channels = parse_list(
            "unet_channels",
            &cfg.get_str("unet_channels", &join(&p.unet.channels)),
        )?;
        p.vae.latent_dim = cfg.get_usize("vae_latent", p.vae.latent_dim)?;
        p.vae.depth = cfg.get_usize("vae_depth", p.vae.depth)?;
        p.vae.channels =
            parse_list("vae_channels", &cfg.get_str("vae_channels", &join(&p.vae.channels)))?;
        p.vae.lambda_kl = cfg.get_f32("lambda_kl", p.vae.lambda_kl)?;
        p.vae.grid = sizes.grid;
        p.source_iters = cfg.get_usize("source_iters", p.source_iters)?;
        p.source_lr = cfg.get_f32("source_lr", p.source_lr)?;
        p.vae_iters = cfg.get_usize("vae_iters", p.vae_iters)?;
        p.vae_lr = cfg.get_f32("vae_lr", p.vae_lr)?;
        p.adapt.iters = cfg.get_usize("adapt_iters", p.adapt.iters)?;
        p.adapt.lr = cfg.get_f32("adapt_lr", p.adapt.lr)?;
        p.adapt.lambda_vae_hat = cfg.get_f32("lambda_vae_hat", p.adapt.lambda_vae_hat)?;
        p.adapt.dynamic_enabled = cfg.get_bool("dynamic_lambda", p.adapt.dynamic_enabled)?;
        p.adapt.ttt_enabled = cfg.get_bool("ttt", p.adapt.ttt_enabled)?;
        p.adapt.hard_teacher = cfg.get_bool("hard_teacher", p.adapt.hard_teacher)?;
        p.adapt.thresholds =
            parse_list("thresholds", &cfg.get_str("thresholds", &join(&p.adapt.thresholds)))?;
        p.adapt.gamma_table =
            parse_list("gamma_table", &cfg.get_str("gamma_table", &join(&p.adapt.gamma_table)))?;
        let lambdas: Vec<f32> =
            parse_list("lambdas", &cfg.get_str("lambdas", "0.0,0.1,0.2,0.5,1.0,2.0"))?;
        let data_dir = {
            let raw = cfg.get_str("data_dir", "");
            if raw.is_empty() { None } else { Some(PathBuf::from(raw)) }
        };
        cfg.finish()?;
        p.unet.validate()?;
        p.vae.validate()?;
        p.adapt.validate()?;
        Ok(Settings { sizes, pipeline: p, lambdas, data_dir })
    }

    /// Flat snapshot for the run manifest.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let p = &self.pipeline;
        vec![
            ("grid".into(), self.sizes.grid.to_string()),
            ("source_train".into(), self.sizes.source_train.to_string()),
            ("source_test".into(), self.sizes.source_test.to_string()),
            ("target_train".into(), self.sizes.target_train.to_string()),
            ("target_test".into(), self.sizes.target_test.to_string()),
            ("unet_depth".into(), p.unet.depth.to_string()),
            ("unet_channels".into(), join(&p.unet.channels)),
            ("vae_latent".into(), p.vae.latent_dim.to_string()),
            ("vae_depth".into(), p.vae.depth.to_string()),
            ("vae_channels".into(), join(&p.vae.channels)),
            ("lambda_kl".into(), p.vae.lambda_kl.to_string()),
            ("source_iters".into(), p.source_iters.to_string()),
            ("source_lr".into(), p.source_lr.to_string()),
            ("vae_iters".into(), p.vae_iters.to_string()),
            ("vae_lr".into(), p.vae_lr.to_string()),
            ("adapt_iters".into(), p.adapt.iters.to_string()),
            ("adapt_lr".into(), p.adapt.lr.to_string()),
            ("lambda_vae_hat".into(), p.adapt.lambda_vae_hat.to_string()),
            ("dynamic_lambda".into(), p.adapt.dynamic_enabled.to_string()),
            ("ttt".into(), p.adapt.ttt_enabled.to_string()),
            ("hard_teacher".into(), p.adapt.hard_teacher.to_string()),
            ("thresholds".into(), join(&p.adapt.thresholds)),
            ("gamma_table".into(), join(&p.adapt.gamma_table)),
            ("lambdas".into(), join(&self.lambdas)),
        ]
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
