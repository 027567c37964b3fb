// desk-scale training calibration probe; variant settings via argv
use fine::data::{generate, load_dataset, Split, SyntheticSpec};
use fine::harness::train::{disentanglement_gap, eval_metrics, train, TrainState};
use fine::harness::RunConfig;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = std::env::temp_dir().join("fine_desk_probe");
    let spec = SyntheticSpec {
        sigma: 0.1,
        seed: 7,
        ..SyntheticSpec::default()
    };
    generate(&spec, &dir).unwrap();
    let ds = load_dataset(&dir).unwrap();

    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("train.batch_size", "32"),
        ("train.lr", "1e-3"),
        ("train.critic_lr", "1e-3"),
        ("train.epochs", "30"),
        ("train.warmup_frac", "1.0"),
        ("train.precision", "double"),
        ("moq.num_experts", "4"),
        ("moq.num_query_tokens", "4"),
        ("moq.dim.text", "24"),
        ("moq.dim.audio", "24"),
        ("moq.dim.video", "24"),
        ("ftre.critic_dim", "32"),
        ("ftre.critic_hidden", "32"),
        ("dcq.alpha", "0.1"),
        ("dcq.s_min", "16"),
        ("fusion.layers", "2"),
        ("fusion.heads", "4"),
        ("loss.lambda_cl", "0.3"),
        ("loss.lambda_aux", "0.2"),
        ("loss.beta_mi", "0.5"),
        ("loss.lambda_up", "0.5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    // argv overrides: key=value pairs
    cfg.apply_overrides(&args).unwrap();

    let mut gaps = Vec::new();
    let mut acc2s = Vec::new();
    for seed in [1u64, 2, 3] {
        cfg.seed = seed;
        let out = std::env::temp_dir().join(format!("fine_desk_run_{seed}"));
        let _ = std::fs::remove_dir_all(&out);
        let t = std::time::Instant::now();
        let summary = train::<f64>(&cfg, &ds, &out).unwrap();
        let secs = t.elapsed().as_secs_f64();

        let ck = fine::harness::Checkpoint::load(&out.join("checkpoints/latest.json")).unwrap();
        let state = TrainState::<f64>::from_checkpoint(&ck, &ds).unwrap();
        let test = eval_metrics(&state.model, &ds, Split::Test, 32).unwrap();
        let (s_cos, u_cos) = disentanglement_gap(&state.model, &ds, Split::Test, 32).unwrap();

        let meds = &summary.epoch_medians;
        let strictly_dec = meds.windows(2).all(|w| w[1] < w[0]);
        let violations: Vec<usize> = meds
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] >= w[0])
            .map(|(i, _)| i + 1)
            .collect();
        println!(
            "seed {seed}: {secs:.0}s  test acc2={:.3} f1={:.3} acc7={:.3} mse={:.3}  strict_dec={} viol={:?}  str={:.3} utr={:.3} gap={:.3}",
            test.acc2, test.f1, test.acc7, test.mse, strictly_dec, violations, s_cos, u_cos, s_cos - u_cos
        );
        println!(
            "  medians: {}",
            meds.iter()
                .map(|m| format!("{m:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        gaps.push(s_cos - u_cos);
        acc2s.push(test.acc2);
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    acc2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("median gap {:.3}  median acc2 {:.3}", gaps[1], acc2s[1]);
}
