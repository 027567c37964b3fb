use fine::fusion::{FusionConfig, FusionModel};
use fine::numcore::nn::Params;
use fine::numcore::{gradcheck_multi, rng_from_seed, Tensor};
use rand::Rng as _;

fn main() {
    let mut rng = rng_from_seed(3);
    let cfg = FusionConfig { layers: 1, heads: 2, d_model: 4, ffn_mult: 2, decoder_queries: 2 };
    let model = FusionModel::<f64>::new(&mut rng, 3, cfg).unwrap();
    let b = 2;
    let xs: Vec<Tensor<f64>> = (0..6)
        .map(|_| Tensor::param(&[b, 3], (0..b * 3).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap())
        .collect();
    let mut params = Params::new();
    model.collect("fusion", &mut params);
    let mut inputs = xs.clone();
    let mut names: Vec<String> = (0..6).map(|i| format!("x{}", i)).collect();
    for (n, t) in &params { inputs.push(t.clone()); names.push(n.clone()); }
    let report = gradcheck_multi(
        |ins| {
            let blocks: [(Tensor<f64>, Tensor<f64>); 3] =
                std::array::from_fn(|m| (ins[2 * m].clone(), ins[2 * m + 1].clone()));
            let (y, _z) = model.fuse_predict(&blocks)?;
            Ok(y.square().mean_all())
        },
        &inputs, 1e-5, 1e-4,
    ).unwrap();
    println!("max_rel_err {} worst {:?}", report.max_rel_err, report.worst);
    if let Some((ti, ei)) = report.worst {
        println!("worst input: {} elem {}", names[ti], ei);
    }
}
