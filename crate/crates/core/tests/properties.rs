use std::f64::consts::PI;

use proptest::prelude::*;

use tsconv::config::{AssignerKind, RunConfig};
use tsconv::cs_conv::{circularize, rotate_kernel, Kernel3};
use tsconv::geometry::{decode_gghl, encode_gghl, iou_polygon, merect_of, GghlBox, MERect, Point};
use tsconv::label_assign::{assign_dtla, assign_gghl_static, gaussian_field, AssignParams, ObjectScores, Tag};
use tsconv::model::HeadKind;
use tsconv::postprocess::{evaluate, nms_rotated, Detection, EvalConfig, GroundTruth};
use tsconv::sampling::GridFrame;

fn gghl_box() -> impl Strategy<Value = GghlBox> {
    (prop::array::uniform4(1.0f64..40.0), prop::array::uniform4(0.0f64..=1.0), -50.0f64..50.0, -50.0f64..50.0).prop_map(
        |(l, f, x, y)| {
            let (w, h) = (l[1] + l[3], l[0] + l[2]);
            GghlBox::new(Point::new(x, y), l, [f[0] * w, f[1] * h, f[2] * w, f[3] * h])
        },
    )
}

fn merect() -> impl Strategy<Value = MERect> {
    (-40.0f64..40.0, -40.0f64..40.0, 2.0f64..50.0, 0.05f64..=1.0, 0.0f64..PI)
        .prop_map(|(x, y, long, f, a)| MERect::new(Point::new(x, y), long, long * f, a))
}

fn kernel() -> impl Strategy<Value = [f64; 9]> {
    prop::array::uniform9(-1.0f64..1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encode_inverts_decode(b in gghl_box(), fx in 0.0f64..=1.0, fy in 0.0f64..=1.0) {
        let (hbb, poly) = decode_gghl(&b).unwrap();
        let anchor = Point::new(hbb.x1 + fx * hbb.width(), hbb.y1 + fy * hbb.height());
        let (hbb2, poly2) = decode_gghl(&encode_gghl(&poly, anchor)).unwrap();
        prop_assert!((hbb.x1 - hbb2.x1).abs() < 1e-9 && (hbb.y2 - hbb2.y2).abs() < 1e-9);
        prop_assert!((iou_polygon(&poly, &poly2) - 1.0).abs() < 1e-9 || poly.area() < 1e-6);
    }

    #[test]
    fn polygon_iou_is_a_bounded_symmetric_similarity(a in gghl_box(), b in gghl_box()) {
        let (pa, pb) = (decode_gghl(&a).unwrap().1, decode_gghl(&b).unwrap().1);
        let (ab, ba) = (iou_polygon(&pa, &pb), iou_polygon(&pb, &pa));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        if pa.area() > 1e-3 {
            prop_assert!((iou_polygon(&pa, &pa) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn merect_encloses_its_polygon(b in gghl_box()) {
        let poly = decode_gghl(&b).unwrap().1;
        prop_assume!(poly.area() > 1.0);
        let r = merect_of(&poly).unwrap();
        prop_assert!(r.long >= r.short);
        prop_assert!(r.area() >= poly.area() - 1e-6);
        prop_assert!(r.area() <= poly.hbb().area() + 1e-6);
        let rect = r.corners();
        for p in poly.pts {
            prop_assert!(rect.contains(p, 1e-6));
        }
    }

    #[test]
    fn circularize_is_linear(a in kernel(), b in kernel(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let mix: [f64; 9] = std::array::from_fn(|i| x * a[i] + y * b[i]);
        let lhs = circularize(&Kernel3::square(mix)).taps;
        let (ca, cb) = (circularize(&Kernel3::square(a)).taps, circularize(&Kernel3::square(b)).taps);
        for i in 0..9 {
            prop_assert!((lhs[i] - (x * ca[i] + y * cb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_form_z8(a in kernel(), k1 in 0usize..8, k2 in 0usize..8) {
        let k = circularize(&Kernel3::square(a));
        let two = rotate_kernel(&rotate_kernel(&k, k1).unwrap(), k2).unwrap();
        prop_assert_eq!(two.taps, rotate_kernel(&k, (k1 + k2) % 8).unwrap().taps);
        prop_assert_eq!(rotate_kernel(&k, 8).unwrap().taps, k.taps);
        // the centre tap never moves
        prop_assert_eq!(two.taps[4], k.taps[4]);
    }

    #[test]
    fn gaussian_field_is_a_unit_peak(r in merect()) {
        let frame = GridFrame::new(10, 10, 8.0);
        let field = gaussian_field(&MERect { center: Point::new(r.center.x + 40.0, r.center.y + 40.0), ..r }, frame);
        prop_assert!(field.values.iter().all(|v| (0.0..=1.0).contains(v)));
        // decays monotonically along the long axis
        let along: Vec<f64> = (0..20).map(|i| tsconv::label_assign::gaussian_value(&r, r.to_image(i as f64, 0.0))).collect();
        prop_assert!(along.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn scores(rects: &[MERect], frame: GridFrame, seed: &[f64]) -> Vec<ObjectScores> {
    rects
        .iter()
        .enumerate()
        .map(|(o, r)| {
            let mut s = ObjectScores::from_field(&gaussian_field(r, frame));
            let n = s.f.len();
            s.l = (0..n).map(|p| seed[(p * 7 + o * 3) % seed.len()]).collect();
            s.c = (0..n).map(|p| seed[(p * 5 + o * 11 + 1) % seed.len()]).collect();
            s.eligible = (0..n).map(|p| seed[(p * 3 + o) % seed.len()] > 0.1).collect();
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dtla_partitions_the_grid(
        rects in prop::collection::vec(merect(), 1..5),
        seed in prop::collection::vec(0.0f64..1.0, 13..40),
        iter in 0usize..=50,
    ) {
        let frame = GridFrame::new(10, 9, 8.0);
        let rects: Vec<MERect> = rects.into_iter().map(|r| MERect { center: Point::new(r.center.x + 40.0, r.center.y + 36.0), ..r }).collect();
        let objs = scores(&rects, frame, &seed);
        let prm = AssignParams { iter, iter_max: 50, ..AssignParams::default() };
        let map = assign_dtla(&objs, 10, 9, prm);
        let n = 90;
        let counted: usize = [Tag::Positive, Tag::Negative, Tag::SoftNegative, Tag::Ignored].iter().map(|t| map.count(*t)).sum();
        prop_assert_eq!(counted, n);
        for p in 0..n {
            match map.tags[p] {
                Tag::Negative => prop_assert!(map.owner[p].is_none()),
                Tag::Positive => {
                    let o = map.owner[p].unwrap();
                    prop_assert!(objs[o].f[p] > prm.t && objs[o].eligible[p]);
                }
                Tag::SoftNegative => prop_assert!((map.w[p] - (1.0 - map.d[p])).abs() < 1e-12),
                Tag::Ignored => prop_assert!(map.owner[p].is_some()),
            }
        }
        for o in 0..objs.len() {
            prop_assert!(map.positives_of(o).len() <= map.p[o]);
        }
    }

    #[test]
    fn static_positives_have_high_prior(
        rects in prop::collection::vec(merect(), 1..5),
        seed in prop::collection::vec(0.0f64..1.0, 13..40),
    ) {
        let frame = GridFrame::new(10, 9, 8.0);
        let rects: Vec<MERect> = rects.into_iter().map(|r| MERect { center: Point::new(r.center.x + 40.0, r.center.y + 36.0), ..r }).collect();
        let objs = scores(&rects, frame, &seed);
        let map = assign_gghl_static(&objs, 10, 9, 0.3);
        for p in 0..90 {
            if map.tags[p] == Tag::Positive {
                let o = map.owner[p].unwrap();
                prop_assert!(objs[o].f[p] > 0.3);
                prop_assert!(objs.iter().all(|other| other.f[p] <= objs[o].f[p]));
            }
            prop_assert!(map.tags[p] != Tag::SoftNegative);
        }
    }
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((gghl_box(), 0usize..3, 0.0f64..1.0), 0..25).prop_map(|v| {
        v.into_iter()
            .map(|(b, class, score)| Detection { polygon: decode_gghl(&b).unwrap().1, class, score })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_keeps_an_antichain(dets in detections(), thr in 0.1f64..0.9) {
        let kept = nms_rotated(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class == b.class {
                    prop_assert!(iou_polygon(&a.polygon, &b.polygon) <= thr + 1e-12);
                }
            }
        }
        // the best box of every class survives
        for c in 0..3 {
            let best = dets.iter().filter(|d| d.class == c).map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                prop_assert!(kept.iter().any(|d| d.class == c && d.score == best));
            }
        }
    }

    #[test]
    fn ap_depends_only_on_score_order(dets in detections(), gts in detections(), k in 0.01f64..10.0) {
        let gts: Vec<GroundTruth> = gts.into_iter().map(|d| GroundTruth { polygon: d.polygon, class: d.class, difficult: false }).collect();
        let cfg = EvalConfig::new(3);
        let a = evaluate(std::slice::from_ref(&dets), std::slice::from_ref(&gts), &cfg);
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: k * d.score.powi(2), ..*d }).collect();
        let b = evaluate(&[scaled], &[gts], &cfg);
        prop_assert_eq!(a.map, b.map);
        prop_assert!(a.map50_95 <= a.map50 + 1e-12);
        prop_assert!(a.map75 <= a.map50 + 1e-12);
    }
}

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        1usize..100,
        prop::array::uniform4(1usize..64),
        1usize..64,
        1e-6f64..1.0,
        0usize..10_000,
        1usize..16,
        any::<bool>(),
        any::<bool>(),
        0.01f64..0.99,
        0.0f64..1.0,
    )
        .prop_map(|(seed, scenes, widths, feat, lr, iterations, batch, plain, dtla, t, theta)| {
            let mut c = RunConfig { seed, scenes, lr, iterations, batch, t, theta, ..RunConfig::default() };
            c.model.widths = widths;
            c.model.feat = feat;
            c.model.head = if plain { HeadKind::Plain } else { HeadKind::TsConv };
            c.assigner = if dtla { AssignerKind::Dtla } else { AssignerKind::Static };
            c
        })
}

proptest! {
    #[test]
    fn config_text_round_trips(cfg in run_config()) {
        prop_assume!(cfg.validate().is_ok());
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
