use super::*;
use crate::maskops::{compose_generator_input, crop_resize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> NetConfig {
    NetConfig {
        input_size: 32,
        roi_grid: 4,
        mask_size: 8,
        paint_size: 16,
        backbone_width: 4,
        backbone_depth: 1,
        backbone_blocks: 1,
        generator_width: 4,
        generator_depth: 2,
        discriminator_width: 4,
        discriminator_depth: 3,
        ..NetConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| {
        [rng.random(), rng.random(), rng.random()]
    })
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |_, _| rng.random_bool(0.3))
}

fn tensor_rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn shape_contract_over_config_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for depth in [0, 1, 2] {
        for (m, g) in [(4, 2), (8, 4), (5, 3)] {
            for gd in [1, 2, 3] {
                let cfg = NetConfig {
                    backbone_depth: depth,
                    mask_size: m,
                    roi_grid: g,
                    generator_depth: gd,
                    ..tiny()
                };
                let params = init_params(&cfg, &mut rng).unwrap();
                let img = random_image(&mut rng, 32);
                let sv = random_mask(&mut rng, 32);
                let out =
                    segmentor_forward(&params, &cfg, &img, &sv, BBox::new(3, 5, 20, 30).unwrap())
                        .unwrap();
                assert_eq!(out.o.dims(), (m, m));
                assert_eq!(out.upsampled.dims(), (16, 16));
                assert!(out.o.data().iter().all(|&v| v > 0.0 && v < 1.0));

                let paint_in = random_image(&mut rng, 16);
                let paint = generator_forward(&params, &cfg, &paint_in, None).unwrap();
                assert_eq!(paint.dims(), (16, 16));
                assert!(paint.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

                let scores = discriminator_forward(&params, &cfg, &paint_in, &paint).unwrap();
                assert_eq!(scores.len(), cfg.score_size().pow(2));
                assert!(scores.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(NetConfig::default().validate().is_ok());
    assert!(NetConfig::full_scale().validate().is_ok());
    assert_eq!(NetConfig::full_scale().mask_size.pow(2), 3364);
    let bad = NetConfig {
        paint_size: 60,
        ..NetConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = NetConfig {
        dropout: 1.0,
        ..NetConfig::default()
    };
    assert!(bad.validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(init_params(
        &NetConfig {
            roi_grid: 0,
            ..tiny()
        },
        &mut rng
    )
    .is_err());
}

#[test]
fn fc_maps_pooled_grid_to_mask_grid() {
    let cfg = tiny();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let w = params.segmentor.get("fc.weight").unwrap();
    assert_eq!(
        w.dims(),
        &[cfg.mask_size * cfg.mask_size, cfg.roi_grid * cfg.roi_grid]
    );
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny();
    let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let c = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for ((_, ga), ((_, gb), (_, gc))) in a
        .groups()
        .into_iter()
        .zip(b.groups().into_iter().zip(c.groups()))
    {
        assert_eq!(ga.snapshot().unwrap(), gb.snapshot().unwrap());
        assert_ne!(ga.snapshot().unwrap(), gc.snapshot().unwrap());
    }
    assert!(a.all_finite().unwrap());
}

#[test]
fn out_of_range_box_is_rejected() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params(&cfg, &mut rng).unwrap();
    let img = random_image(&mut rng, 32);
    let sv = random_mask(&mut rng, 32);
    let err = segmentor_forward(&params, &cfg, &img, &sv, BBox::new(10, 10, 40, 20).unwrap());
    assert!(matches!(err, Err(Error::EmptyCrop(..))));
    let small = random_image(&mut rng, 16);
    assert!(segmentor_forward(
        &params,
        &cfg,
        &small,
        &BinaryMask::zeros(16, 16),
        BBox::full(8, 8)
    )
    .is_err());
}

fn roi_oracle(map: &[f32], fw: usize, bx: BBox, g: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for i in 0..g {
        let ys = bx.y0 + (i * bx.height()) / g..bx.y0 + ((i + 1) * bx.height()).div_ceil(g);
        for j in 0..g {
            let xs = bx.x0 + (j * bx.width()) / g..bx.x0 + ((j + 1) * bx.width()).div_ceil(g);
            let mut best = f32::NEG_INFINITY;
            for y in ys.clone() {
                for x in xs.clone() {
                    best = best.max(map[y * fw + x]);
                }
            }
            out.push(best);
        }
    }
    out
}

#[test]
fn roi_pool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let f = rng.random_range(4..12);
        let g = rng.random_range(1..6);
        let x0 = rng.random_range(0..f - 1);
        let y0 = rng.random_range(0..f - 1);
        let bx = BBox::new(
            x0,
            y0,
            rng.random_range(x0 + 1..=f),
            rng.random_range(y0 + 1..=f),
        )
        .unwrap();
        let map: Vec<f32> = (0..f * f)
            .map(|_| rng.random::<f32>() * 4.0 - 2.0)
            .collect();
        let t = Tensor::from_vec(map.clone(), (1, 1, f, f), &Device::Cpu).unwrap();
        let got = roi_max_pool(&t, &[bx], g)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(got, roi_oracle(&map, f, bx, g), "f={f} g={g} {bx:?}");
    }
}

#[test]
fn stub_backbone_ignores_pixels_outside_box() {
    let cfg = NetConfig {
        backbone_depth: 0,
        ..tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_params(&cfg, &mut rng).unwrap();
    let img = random_image(&mut rng, 32);
    let sv = random_mask(&mut rng, 32);
    let bx = BBox::new(6, 9, 22, 25).unwrap();
    let base = segmentor_forward(&params, &cfg, &img, &sv, bx).unwrap();

    let mut outside = img.clone();
    let mut sv_out = sv.clone();
    for y in 0..32 {
        for x in 0..32 {
            if !(bx.x0..bx.x1).contains(&x) || !(bx.y0..bx.y1).contains(&y) {
                outside.set(x, y, [rng.random(), rng.random(), rng.random()]);
                sv_out.set(x, y, 1.0 - sv.get(x, y));
            }
        }
    }
    let moved = segmentor_forward(&params, &cfg, &outside, &sv_out, bx).unwrap();
    assert_eq!(base.o, moved.o);

    let mut inside = img.clone();
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            inside.set(x, y, [1.0, 1.0, 1.0]);
        }
    }
    let changed = segmentor_forward(&params, &cfg, &inside, &sv, bx).unwrap();
    assert_ne!(base.o, changed.o);
}

#[test]
fn upsample_is_fixed_bilinear_resize() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = init_params(&cfg, &mut rng).unwrap();
    let img = random_image(&mut rng, 32);
    let sv = random_mask(&mut rng, 32);
    let out =
        segmentor_forward(&params, &cfg, &img, &sv, BBox::new(0, 0, 32, 32).unwrap()).unwrap();
    let oracle = crop_resize(&out.o, BBox::full(8, 8), (16, 16)).unwrap();
    for (a, b) in out.upsampled.data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    // every segmentor parameter sits before the sigmoid
    let expected = ["fc.", "head.", "stage"];
    assert!(params
        .segmentor
        .names()
        .all(|n| expected.iter().any(|p| n.starts_with(p))));
}

#[test]
fn compose_batch_matches_raster_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng, 12);
    let o_soft: Vec<f32> = (0..144).map(|_| rng.random()).collect();
    let o_soft = BinaryMask::new(12, 12, o_soft).unwrap();
    let v = random_mask(&mut rng, 12);
    let expected =
        compose_generator_input(&img, &crate::maskops::binarize(&o_soft, 0.5), &v).unwrap();

    let it = image_tensor(&img).unwrap().unsqueeze(0).unwrap();
    let ot = mask_tensor(&o_soft).unwrap().unsqueeze(0).unwrap();
    let vt = mask_tensor(&v).unwrap().unsqueeze(0).unwrap();
    let got = compose_batch(&it, &ot, &vt, true).unwrap();
    let got = image_from_tensor(&got.squeeze(0).unwrap()).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn straight_through_passes_gradient_to_soft_mask() {
    let o = candle_core::Var::from_tensor(&Tensor::new(&[[[0.3f32, 0.7]]], &Device::Cpu).unwrap())
        .unwrap();
    let img = Tensor::zeros((1, 3, 1, 2), DType::F32, &Device::Cpu).unwrap();
    let v = Tensor::zeros((1, 1, 2), DType::F32, &Device::Cpu).unwrap();
    let m = compose_batch(&img, o.as_tensor(), &v, true).unwrap();
    // red channel equals the hard mask, blue its complement
    let red = m.narrow(1, 0, 1).unwrap();
    assert_eq!(
        red.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        vec![0.0, 1.0]
    );
    let grads = red.sum_all().unwrap().backward().unwrap();
    let g = grads
        .get(&o)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert_eq!(g, vec![1.0, 1.0]);
}

#[test]
fn generator_is_deterministic_without_noise() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_params(&cfg, &mut rng).unwrap();
    let x = random_image(&mut rng, 16);
    let a = generator_forward(&params, &cfg, &x, None).unwrap();
    let b = generator_forward(&params, &cfg, &x, None).unwrap();
    assert_eq!(a, b);
    let mut noise = ChaCha8Rng::seed_from_u64(77);
    let c = generator_forward(&params, &cfg, &x, Some(&mut noise)).unwrap();
    assert_ne!(a, c);

    let nc = NetConfig {
        noise_mode: NoiseMode::NoiseChannel,
        ..tiny()
    };
    let params = init_params(&nc, &mut rng).unwrap();
    let a = generator_forward(&params, &nc, &x, None).unwrap();
    assert_eq!(a, generator_forward(&params, &nc, &x, None).unwrap());
    assert_ne!(
        a,
        generator_forward(&params, &nc, &x, Some(&mut noise)).unwrap()
    );
    assert!(generator_forward(&params, &nc, &random_image(&mut rng, 8), None).is_err());
}

#[test]
fn discriminator_reads_both_inputs() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = init_params(&cfg, &mut rng).unwrap();
    let c = random_image(&mut rng, 16);
    let j = random_image(&mut rng, 16);
    let base = discriminator_forward(&params, &cfg, &c, &j).unwrap();
    assert_ne!(
        base,
        discriminator_forward(&params, &cfg, &c, &random_image(&mut rng, 16)).unwrap()
    );
    assert_ne!(
        base,
        discriminator_forward(&params, &cfg, &random_image(&mut rng, 16), &j).unwrap()
    );
    assert!(discriminator_forward(&params, &cfg, &c, &random_image(&mut rng, 8)).is_err());
}

#[test]
fn fresh_discriminator_scores_near_half() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut total = 0.0;
    for _ in 0..100 {
        let params = init_params(&cfg, &mut rng).unwrap();
        let s = discriminator_forward(
            &params,
            &cfg,
            &random_image(&mut rng, 16),
            &random_image(&mut rng, 16),
        )
        .unwrap();
        total += s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    }
    let mean = total / 100.0;
    assert!((mean - 0.5).abs() < 0.15, "mean score {mean}");
}

#[test]
fn paint_loss_reaches_segmentor_parameters() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = init_params(&cfg, &mut rng).unwrap();
    let input = tensor_rand(&mut rng, &[2, 4, 32, 32]);
    let boxes = [
        BBox::new(2, 2, 30, 30).unwrap(),
        BBox::new(0, 4, 16, 28).unwrap(),
    ];
    let seg = segmentor_forward_batch(&params, &cfg, &input, &boxes).unwrap();
    let img = tensor_rand(&mut rng, &[2, 3, 16, 16]);
    let v = Tensor::zeros((2, 16, 16), DType::F32, &Device::Cpu).unwrap();
    let m = compose_batch(&img, &seg.upsampled, &v, true).unwrap();
    let paint = generator_forward_batch(&params, &cfg, &m, None).unwrap();
    let loss = (paint - &img).unwrap().abs().unwrap().mean_all().unwrap();
    let grads = loss.backward().unwrap();
    let g = grads
        .get(params.segmentor.var("fc.weight").unwrap())
        .unwrap();
    let norm = g
        .sqr()
        .unwrap()
        .sum_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(norm > 0.0);
    assert!(grads
        .get(params.segmentor.var("stage0.down.weight").unwrap())
        .is_some());
}
