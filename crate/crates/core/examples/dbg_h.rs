// Scratch probe: conflict-EMA distribution under the default schedule.
use duosplat::config::TrainConfig;
use duosplat::synth::{generate_views, DatasetSpec, IlluminationLevel, OcclusionLevel};
use duosplat::train::{train_step, TrainState};

fn pct(v: &mut Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * q) as usize]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let illum = args.get(1).map(|s| s.as_str()).unwrap_or("strong");
    let occ = args.get(2).map(|s| s.as_str()).unwrap_or("high");
    let spec = DatasetSpec {
        resolution: 64,
        num_views: 8,
        num_heldout: 2,
        occlusion: OcclusionLevel::parse(occ).unwrap(),
        illumination: IlluminationLevel::parse(illum).unwrap(),
    };
    let ds = generate_views(101, &spec).unwrap();
    let views = ds.training_views();
    let cfg = TrainConfig::default();
    let mut state = TrainState::init(&cfg, &views, 101).unwrap();
    for it in 0..1200u64 {
        let r = train_step(&mut state, &views).unwrap();
        if (it + 1) % 200 == 0 {
            let mut h = state.cloud.conflict_ema.clone();
            let mut op: Vec<f64> =
                state.cloud.opacity_logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
            println!(
                "it {:4} n={:3} H p10/p50/p90 = {:.3}/{:.3}/{:.3}  opacity p10/p50/p90 = {:.3}/{:.3}/{:.3} pruned_this_step={} loss={:.4}",
                it + 1,
                state.cloud.len(),
                pct(&mut h, 0.1),
                pct(&mut h, 0.5),
                pct(&mut h, 0.9),
                pct(&mut op, 0.1),
                pct(&mut op, 0.5),
                pct(&mut op, 0.9),
                r.pruned,
                r.loss_i
            );
        }
    }
}
