// isolate which MI term breaks the gradient check with symmetric critics
use fine::ftre::*;
use fine::numcore::nn::Params;
use fine::numcore::{gradcheck_multi, rng_from_seed, Tensor};
use rand::Rng as _;

fn main() {
    let mut rng = rng_from_seed(14);
    let c = FtreConfig {
        reduction_ratio: 0.5,
        critic_dim: 8,
        critic_temperature: 1.0,
        critic_hidden: 8,
    };
    let d_model = 4;
    let h = 2;
    let mods: Vec<FtreModality<f64>> = (0..3)
        .map(|_| FtreModality::new(&mut rng, d_model, h, &c))
        .collect();
    let labels_enc = LabelEncoders::<f64>::new(&mut rng, h, -3.0, 3.0);
    let bank = CriticBank::new(&mut rng, [h; 3], h, &c);
    let b = 4;
    let xs: Vec<Tensor<f64>> = (0..3)
        .map(|_| {
            Tensor::param(
                &[b, 2, d_model],
                (0..b * 2 * d_model).map(|_| rng.gen_range(-0.8..0.8)).collect(),
            )
            .unwrap()
        })
        .collect();
    let y = Tensor::param(&[b], (0..b).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
    let shuffle = rotation_shuffle(b, 2);

    let mut params = Params::new();
    for (i, m) in mods.iter().enumerate() {
        m.collect(&format!("m{i}"), &mut params);
    }
    labels_enc.collect("labels", &mut params);
    let mut inputs = xs.clone();
    inputs.push(y.clone());
    let mut names: Vec<String> = vec!["x0".into(), "x1".into(), "x2".into(), "y".into()];
    for (n, t) in &params {
        inputs.push(t.clone());
        names.push(n.clone());
    }

    for (mode, h) in [("utr", 1e-5), ("utr", 1e-4), ("utr", 1e-6), ("utr", 3e-5)] {
        let report = gradcheck_multi(
            |ins| {
                let feats: Vec<FactorizedFeatures<f64>> = (0..3)
                    .map(|m| mods[m].forward(&ins[m]))
                    .collect::<fine::Result<_>>()?;
                let emb = labels_enc.encode(&ins[3])?;
                let mut terms: Vec<Tensor<f64>> = Vec::new();
                for (pi, (a, bb)) in [(0usize, 1usize), (0, 2), (1, 2)].iter().enumerate() {
                    match mode {
                        "sha" => terms.push(infonce_lower(
                            &feats[*a].pooled()?.0,
                            &feats[*bb].pooled()?.0,
                            &bank.sha[pi].frozen(),
                        )?),
                        "uni" => terms.push(nce_club_upper(
                            &feats[*a].pooled()?.1,
                            &feats[*bb].pooled()?.1,
                            &bank.uni[pi].frozen(),
                            &shuffle,
                        )?),
                        "str" => terms.push(conditional_nce_club(
                            &feats[*a].x_str,
                            &feats[*bb].x_str,
                            &emb.y_str,
                            &bank.cond[pi].frozen(),
                            &shuffle,
                        )?),
                        "utr" => terms.push(infonce_lower(
                            &feats[pi].x_utr,
                            &emb.y_utr[pi],
                            &bank.utr[pi].frozen(),
                        )?),
                        _ => terms.push(feats[pi].l_recon.clone()),
                    }
                }
                fine::numcore::ops::sum_tensors(&terms)
            },
            &inputs,
            h,
            1e-4,
        )
        .unwrap();
        let worst = report.worst.map(|(ti, ei)| format!("{} [{}]", names[ti], ei));
        println!(
            "{mode} h={h:.0e}: max_rel={:.3e} pass={} worst={:?}",
            report.max_rel_err, report.pass, worst
        );
    }
}
