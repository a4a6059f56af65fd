//! Scratch harness for experiment tuning (deleted before ship).
use fedmm_core::ctr::AblationMode;
use fedmm_core::data::SyntheticSpec;
use fedmm_core::pipeline::*;
use std::time::Instant;

fn desk_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = DataSource::Synthetic(SyntheticSpec {
        num_markets: 3,
        users_per_market: 200,
        items_per_market: 100,
        shared_dim: 12,
        market_dim: 4,
        heterogeneity: 0.5,
        interactions_per_user: 30,
        noise: 0.5,
        seed: 0,
    });
    cfg.dim = 16; cfg.cf.dim = 16; cfg.d_latent = 16;
    cfg.codebook_size = 64;
    cfg.cf.epochs = 15;
    cfg.rounds = 4; cfg.local_epochs = 2; cfg.adapt_epochs = 1;
    cfg.ctr.tower = vec![64, 32];
    cfg.ctr.epochs = 8; cfg.ctr.patience = 3; cfg.ctr.lr = 1e-3;
    cfg.master_seed = seed;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args.get(1).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1, 2]);
    let modes = [AblationMode::Full, AblationMode::NoGlobal, AblationMode::RandomCodebook];
    let tmp = std::env::temp_dir().join("fedmm_tune");
    let _ = std::fs::remove_dir_all(&tmp);
    for &seed in &seeds {
        let t0 = Instant::now();
        let mut line = format!("seed {seed}:");
        for mode in modes {
            let mut cfg = desk_config(seed);
            cfg.mode = mode;
            let dir = tmp.join(format!("s{seed}_{}", mode.as_str()));
            let summary = run_pipeline(&cfg, &dir).unwrap();
            line.push_str(&format!(" {}={:.4}", mode.as_str(), summary.overall_auc));
        }
        println!("{line}  ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}
