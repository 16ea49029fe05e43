use icm_core::autodiff::{Graph, Precision, Shape, Tensor};
use icm_core::bitstream::Bitstream;
use icm_core::checkpoint::{from_bytes, to_bytes};
use icm_core::eval::{bd_rate, pareto_front, RDPoint};
use icm_core::imageio::{rgb_to_tensor, tensor_to_rgb, to_u8};
use icm_core::params::ModelParams;
use icm_core::rans::{build_cdf, rans_decode, rans_encode, CdfTable, TOTAL};
use icm_core::train::{loss_weights, select_checkpoint, ScheduleParams, Snapshot};
use proptest::prelude::*;

fn probabilities() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..60).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 0.0).then(|| v.iter().map(|p| p / s).collect())
    })
}

fn table() -> impl Strategy<Value = CdfTable> {
    (probabilities(), -50i32..50).prop_map(|(p, off)| build_cdf(&p, off).unwrap())
}

fn rd_points() -> impl Strategy<Value = Vec<RDPoint>> {
    prop::collection::vec((0.01f64..4.0, 0.0f64..1.0), 1..20)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (b, s))| RDPoint::new(b, s, format!("p{i}"))).collect())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cdf_tables_are_valid(p in probabilities()) {
        let t = build_cdf(&p, 0).unwrap();
        prop_assert_eq!(t.cumulative[0], 0);
        prop_assert_eq!(*t.cumulative.last().unwrap(), TOTAL);
        prop_assert!(t.cumulative.windows(2).all(|w| w[1] > w[0]));
        prop_assert_eq!(t.symbol_count(), p.len());
    }

    #[test]
    fn rans_round_trips(pool in prop::collection::vec(table(), 1..4), picks in prop::collection::vec((0usize..4, 0u32..TOTAL), 0..400)) {
        let tables: Vec<&CdfTable> = picks.iter().map(|(i, _)| &pool[i % pool.len()]).collect();
        let symbols: Vec<i32> = picks.iter().zip(&tables).map(|((_, slot), t)| t.lookup(*slot).0).collect();
        let bytes = rans_encode(&symbols, &tables).unwrap();
        prop_assert_eq!(rans_decode(&bytes, &tables).unwrap(), symbols);
    }

    #[test]
    fn bitstream_round_trips(
        w in 1u32..512, h in 1u32..512,
        ls in prop::array::uniform3(0u32..64), hs in prop::array::uniform3(0u32..64),
        id in prop::array::uniform32(any::<u8>()),
        hyper in prop::collection::vec(any::<u8>(), 0..64),
        latent in prop::collection::vec(any::<u8>(), 0..256),
    ) {
        let bs = Bitstream { width: w, height: h, latent_shape: ls, hyper_shape: hs, model_id: id, hyper_payload: hyper, latent_payload: latent };
        let bytes = bs.serialize();
        prop_assert_eq!(bytes.len(), bs.serialized_len());
        let back = Bitstream::parse(&bytes).unwrap();
        prop_assert_eq!(back.serialize(), bytes);
        prop_assert_eq!(back, bs);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 1..40), 1..5), epoch in any::<u32>()) {
        let mut p = ModelParams::new([3; 32]);
        for (i, v) in values.iter().enumerate() {
            let t = Tensor::new(Shape::new(1, 1, 1, v.len()), v.iter().map(|&x| f64::from(x)).collect()).unwrap();
            p.insert(format!("layer{i}.w"), t).unwrap();
        }
        let bytes = to_bytes(&p, None, epoch);
        let ck = from_bytes(&bytes, Some(&[3; 32])).unwrap();
        prop_assert_eq!(&ck.params, &p);
        prop_assert_eq!(ck.epoch, epoch);
        prop_assert_eq!(to_bytes(&ck.params, None, epoch), bytes);
    }

    #[test]
    fn pareto_front_is_exact(points in rd_points()) {
        let front = pareto_front(&points).unwrap();
        prop_assert!(front.windows(2).all(|w| w[0].bpp <= w[1].bpp));
        for f in &front {
            prop_assert!(!points.iter().any(|q| q.bpp <= f.bpp && q.score >= f.score && (q.bpp < f.bpp || q.score > f.score)));
        }
        for p in &points {
            prop_assert!(front.iter().any(|f| f.bpp <= p.bpp && f.score >= p.score));
        }
    }

    #[test]
    fn bd_rate_of_scaled_curve(base in 0.02f64..0.2, steps in prop::collection::vec((1.2f64..2.5, 0.01f64..0.1), 4..8), s in 0.3f64..3.0) {
        let mut b = base;
        let mut q = 0.1;
        let anchor: Vec<RDPoint> = steps.iter().enumerate().map(|(i, &(m, d))| {
            b *= m;
            q += d;
            RDPoint::new(b, q, format!("a{i}"))
        }).collect();
        let test: Vec<RDPoint> = anchor.iter().map(|p| RDPoint::new(p.bpp * s, p.score, p.tag.clone())).collect();
        let got = bd_rate(&anchor, &test).percent().unwrap();
        prop_assert!((got - (s - 1.0) * 100.0).abs() < 1e-6 * (1.0 + got.abs()));
    }

    #[test]
    fn schedule_weights_never_decrease(e in 0u32..600) {
        let sp = ScheduleParams::default();
        let (a, b) = (loss_weights(e, &sp), loss_weights(e + 1, &sp));
        prop_assert!(a.w_task >= 0.0 && a.w_rate >= 0.0);
        prop_assert!(b.w_task >= a.w_task && b.w_rate >= a.w_rate);
        prop_assert_eq!(a.w_mse, 1.0);
    }

    #[test]
    fn selection_picks_nearest_rate(bpps in prop::collection::vec(0.01f64..3.0, 1..30), target in 0.0f64..3.5) {
        let snaps: Vec<Snapshot> = bpps.iter().enumerate().map(|(i, &b)| Snapshot {
            epoch: i as u32, checkpoint: format!("e{i}"), val_bpp: b, val_acc: 0.0, l_rate: 0.0, l_mse: 0.0, l_task: 0.0,
        }).collect();
        let best = select_checkpoint(&snaps, target).unwrap();
        let d = (best.val_bpp - target).abs();
        prop_assert!(bpps.iter().all(|b| (b - target).abs() >= d - 1e-12));
    }

    #[test]
    fn eight_bit_images_survive_the_tensor_trip(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            let v = seed.wrapping_mul(u64::from(x * 31 + y * 7 + 1)).to_le_bytes();
            image::Rgb([v[1], v[3], v[5]])
        });
        let t = rgb_to_tensor(&img);
        prop_assert_eq!(tensor_to_rgb(&t).unwrap(), img);
        prop_assert!(t.data().iter().all(|&v| to_u8(v) as f64 == (v * 255.0).round()));
    }

    #[test]
    fn transposed_conv_is_adjoint(cin in 1usize..4, cout in 1usize..4, k in 1usize..6, stride in 1usize..4, pad_raw in 0usize..3, n_out in 2usize..6, seed in any::<u64>()) {
        use rand::Rng;
        // sizes where the strided windows tile the padded input exactly
        let pad = pad_raw % (k / 2 + 1);
        let hw = (n_out - 1) * stride + k - 2 * pad;
        let mut r = icm_core::rng::stream(seed, "prop.adjoint");
        let mut rand_t = |s: Shape| Tensor::from_fn(s, |_| r.gen_range(-1.0..1.0));
        let x = rand_t(Shape::new(1, cin, hw, hw));
        let w = rand_t(Shape::new(cout, cin, k, k));
        let mut g = Graph::with_precision(Precision::F64);
        let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w).unwrap());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let u = rand_t(g.shape(y));
        let uv = g.constant(u.clone()).unwrap();
        let back = g.conv_transpose2d(uv, wv, None, stride, pad).unwrap();
        prop_assert_eq!(g.shape(back), x.shape());
        let lhs = x.dot(g.value(back));
        let rhs = g.value(y).dot(&u);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
    }
}
