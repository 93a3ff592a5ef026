use caac_core::baselines::{retrieve_ipa, IpaLut};
use caac_core::model::{AngleMode, CaacConfig, CaacModel, ForwardTrace, TrainableModel};
use caac_core::scene::{
    apply_3d_effects, gaussian_blur_toroidal, generate_cot_field, ipa_reflectance, render_ipa,
    CotField, RadianceField, SceneParams, ViewGeometry,
};
use caac_core::tensor::{Tape, Tensor};
use caac_core::train::{ErrorAccum, Metrics};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ViewGeometry> {
    (0.0..60.0f64, 0.0..45.0f64, 0.0..360.0f64)
        .prop_map(|(s, v, a)| ViewGeometry::new(s, v, a, 1.0))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_stochastic(values in prop::collection::vec(-30.0..30.0f64, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 4], values).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reflectance_is_strictly_monotone(mu0 in 0.34..1.0f64, g in 0.0..0.99f64) {
        let mut prev = -1.0;
        for i in 0..1000 {
            let r = ipa_reflectance(i as f64 * 0.158, mu0, g);
            prop_assert!(r > prev && r < 1.0);
            prev = r;
        }
    }

    #[test]
    fn ipa_retrieval_commutes_with_pixel_permutation(seed in 0u64..1000, geom in geometry(), perm in permutation(64)) {
        let lut = IpaLut::default_for(0.85).unwrap();
        let cot = generate_cot_field(seed, 8, 8, 0.1, &SceneParams::default()).unwrap();
        let r = apply_3d_effects(&render_ipa(&cot, &geom, &SceneParams::default()), &cot, &geom, &SceneParams::default()).unwrap();
        let shuffled = RadianceField::new(8, 8, perm.iter().map(|&i| r.values[i]).collect(), geom).unwrap();
        let a = retrieve_ipa(&r, &lut).unwrap();
        let b = retrieve_ipa(&shuffled, &lut).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.tau[k].to_bits(), a.tau[i].to_bits());
            prop_assert_eq!(b.saturated[k], a.saturated[i]);
        }
    }

    #[test]
    fn rendered_reflectance_stays_in_unit_interval(seed in 0u64..1000, geom in geometry(), kappa in 0.0..2.0f64) {
        let params = SceneParams { kappa, ..SceneParams::default() };
        let cot = generate_cot_field(seed, 16, 16, 0.1, &params).unwrap();
        let r = apply_3d_effects(&render_ipa(&cot, &geom, &params), &cot, &geom, &params).unwrap();
        prop_assert!(r.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(cot.values.iter().all(|v| (0.0..=158.0).contains(v)));
    }

    #[test]
    fn blur_preserves_mean(seed in 0u64..1000, sigma in 0.1..4.0f64) {
        let cot = generate_cot_field(seed, 16, 16, 0.1, &SceneParams::default()).unwrap();
        let blurred = gaussian_blur_toroidal(&cot.values, 16, 16, sigma);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&blurred) - mean(&cot.values)).abs() < 1e-6);
    }

    #[test]
    fn metrics_ignore_pixel_order(pairs in prop::collection::vec((0.0..150.0f64, 0.0..150.0f64), 2..64), perm_seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let acc = |ps: &[(f64, f64)]| {
            let mut a = ErrorAccum::default();
            ps.iter().for_each(|&(p, t)| a.add_pixel(p, t, false));
            Metrics::from_geometries("m", "t", &[(ViewGeometry::nadir_sun(), a)])
        };
        let (a, b) = (acc(&pairs), acc(&shuffled));
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
        prop_assert!(close(a.overall.rmse_tau, b.overall.rmse_tau));
        prop_assert!(close(a.overall.rmse_log, b.overall.rmse_log));
        prop_assert!(close(a.overall.mean_rel_err, b.overall.mean_rel_err));
        prop_assert!(a.overall.rmse_tau >= 0.0 && a.flatness >= 1.0);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, geom in geometry()) {
        let cot = generate_cot_field(seed, 16, 16, 0.1, &SceneParams::default()).unwrap();
        let r = render_ipa(&cot, &geom, &SceneParams::default());
        let model = CaacModel::new(CaacConfig::default(), seed).unwrap();
        for a in model.attention_maps(&r).unwrap() {
            let t = a.shape()[1];
            for row in a.data().chunks(t) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    /// Without position or angle information the encoder cannot tell tokens
    /// apart, so permuting tokens permutes outputs.
    #[test]
    fn encoder_is_permutation_equivariant(seed in 0u64..1000, perm in permutation(16)) {
        let cfg = CaacConfig { positional: false, angle_mode: AngleMode::Off, ..CaacConfig::default() };
        let model = CaacModel::new(cfg, seed).unwrap();
        let input = Tensor::new(vec![16, 32], (0..512).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect()).unwrap();
        let permuted = Tensor::new(vec![16, 32], perm.iter().flat_map(|&i| input.data()[i * 32..(i + 1) * 32].to_vec()).collect()).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = model.params().register(&mut tape, false).unwrap();
            let mut h = tape.leaf(x).unwrap();
            for layer in 0..model.num_layers() {
                h = model.encoder_block(&mut tape, &p, layer, h, &mut ForwardTrace::default()).unwrap();
            }
            tape.value(h).to_vec()
        };
        let (a, b) = (run(&input), run(&permuted));
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..32 {
                prop_assert!((b[k * 32 + j] - a[i * 32 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn angle_off_output_ignores_geometry(seed in 0u64..1000, g1 in geometry(), g2 in geometry()) {
        let cot = generate_cot_field(seed, 16, 16, 0.1, &SceneParams::default()).unwrap();
        let r = render_ipa(&cot, &g1, &SceneParams::default());
        let model = CaacModel::new(CaacConfig { angle_mode: AngleMode::Off, ..CaacConfig::default() }, seed).unwrap();
        let other = RadianceField { geometry: g2, ..r.clone() };
        let a = model.forward_raw(&r).unwrap();
        let b = model.forward_raw(&other).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn constant_field_renders_constant_reflectance() {
    let cot = CotField::constant(8, 8, 0.1, 12.0);
    let r = render_ipa(
        &cot,
        &ViewGeometry::new(40.0, 0.0, 0.0, 1.0),
        &SceneParams::default(),
    );
    assert!(r.values.iter().all(|&v| v == r.values[0]));
}
