//! Independent brute-force oracles for the detection metrology: anchor
//! assignment, greedy suppression, and average precision. The oracles are
//! deliberately separate codings of the rules.

use scarfnet_core::detector::{
    build_anchors, decode_nms, eval_map, iou, match_anchors, Anchor, AnchorLabel, BoxPx,
    Detection, GtBox,
};
use scarfnet_core::LevelLayout;

/// Oracle: apply the matching rules literally from the IoU matrix.
fn match_oracle(
    anchors: &[Anchor],
    gts: &[GtBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<AnchorLabel> {
    let m: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(&a.to_box(), &g.rect)).collect())
        .collect();
    let mut labels = vec![AnchorLabel::Background; anchors.len()];
    for i in 0..anchors.len() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for j in 0..gts.len() {
            if m[i][j] > best {
                best = m[i][j];
                arg = j;
            }
        }
        if gts.is_empty() {
            continue;
        }
        labels[i] = if best >= pos_thr {
            AnchorLabel::Positive { class: gts[arg].class + 1, gt: arg }
        } else if best < neg_thr {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
    }
    for (j, gt) in gts.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for i in 0..anchors.len() {
            if m[i][j] > best {
                best = m[i][j];
                arg = i;
            }
        }
        labels[arg] = AnchorLabel::Positive { class: gt.class + 1, gt: j };
    }
    labels
}

fn anchor_at(cx: f64, cy: f64, w: f64, h: f64) -> Anchor {
    Anchor { level: 0, cx, cy, w, h }
}

#[test]
fn match_anchors_crafted_case_vs_oracle() {
    // 3 anchors, 2 GTs: one clear positive, one ignore-zone anchor that the
    // second GT claims through the fallback, one background
    let anchors = vec![
        anchor_at(8.0, 8.0, 8.0, 8.0),
        anchor_at(22.0, 8.0, 8.0, 8.0),
        anchor_at(48.0, 48.0, 8.0, 8.0),
    ];
    let gts = vec![
        GtBox { class: 0, rect: BoxPx::new(4.0, 4.0, 12.0, 12.0) },
        GtBox { class: 2, rect: BoxPx::new(20.0, 5.0, 27.0, 12.0) },
    ];
    let got = match_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
    let want = match_oracle(&anchors, &gts, 0.5, 0.4);
    assert_eq!(got.labels, want);
    assert_eq!(got.labels[0], AnchorLabel::Positive { class: 1, gt: 0 });
    assert_eq!(got.labels[1], AnchorLabel::Positive { class: 3, gt: 1 });
    assert_eq!(got.labels[2], AnchorLabel::Background);
    // every GT matched to at least one anchor
    for j in 0..gts.len() {
        assert!(got
            .labels
            .iter()
            .any(|l| matches!(l, AnchorLabel::Positive { gt, .. } if *gt == j)));
    }
}

#[test]
fn match_anchors_randomized_vs_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let anchors: Vec<Anchor> = (0..12)
            .map(|_| {
                anchor_at(
                    rng.gen_range(4.0..60.0),
                    rng.gen_range(4.0..60.0),
                    rng.gen_range(6.0..24.0),
                    rng.gen_range(6.0..24.0),
                )
            })
            .collect();
        let gts: Vec<GtBox> = (0..rng.gen_range(1..4))
            .map(|_| {
                let x1 = rng.gen_range(0.0..48.0);
                let y1 = rng.gen_range(0.0..48.0);
                GtBox {
                    class: rng.gen_range(0..3),
                    rect: BoxPx::new(x1, y1, x1 + rng.gen_range(4.0..16.0), y1 + rng.gen_range(4.0..16.0)),
                }
            })
            .collect();
        let got = match_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
        assert_eq!(got.labels, match_oracle(&anchors, &gts, 0.5, 0.4));
    }
}

/// Oracle: a candidate survives iff no higher-ranked survivor overlaps it.
fn nms_oracle(cands: &[(usize, f64, BoxPx)], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .1
            .partial_cmp(&cands[a].1)
            .unwrap()
            .then(cands[a].0.cmp(&cands[b].0))
    });
    let mut survives = vec![false; cands.len()];
    for (rank, &i) in order.iter().enumerate() {
        let mut ok = true;
        for &j in &order[..rank] {
            if survives[j] && iou(&cands[i].2, &cands[j].2) > thr {
                ok = false;
                break;
            }
        }
        survives[i] = ok;
    }
    let mut kept: Vec<usize> = (0..cands.len()).filter(|&i| survives[i]).collect();
    kept.sort_by(|&a, &b| {
        cands[b].1.partial_cmp(&cands[a].1).unwrap().then(cands[a].0.cmp(&cands[b].0))
    });
    kept
}

#[test]
fn decode_nms_five_box_fixture_vs_oracle() {
    // one level, 1x1 grid: anchors at the same center with three aspect
    // variants, plus a second level for spread
    let layouts = vec![
        LevelLayout { channels: 1, h: 2, w: 2, stride: 8 },
    ];
    let anchors = build_anchors(&layouts);
    let n = anchors.len();
    assert_eq!(n, 12);
    let num_classes = 1;
    let k1 = 2;

    // craft logits: five interesting anchors, the rest strongly background
    let mut cls = vec![0.0f64; n * k1];
    for row in cls.chunks_mut(k1) {
        row[0] = 6.0;
    }
    let hot = [0usize, 1, 4, 5, 8];
    let strength = [4.0, 3.5, 3.0, 2.5, 2.0];
    for (&i, &s) in hot.iter().zip(&strength) {
        cls[i * k1] = 0.0;
        cls[i * k1 + 1] = s;
    }
    let reg = vec![0.0f64; n * 4];

    let dets = decode_nms(&cls, &reg, &anchors, num_classes, (16, 16), 0.05, 0.45, 100);

    // oracle over the same candidate set
    let probs: Vec<f64> = (0..n)
        .map(|i| {
            let row = &cls[i * k1..(i + 1) * k1];
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            e1 / (e0 + e1)
        })
        .collect();
    let clamp = |b: BoxPx| BoxPx::new(b.x1.clamp(0.0, 16.0), b.y1.clamp(0.0, 16.0), b.x2.clamp(0.0, 16.0), b.y2.clamp(0.0, 16.0));
    let cands: Vec<(usize, f64, BoxPx)> = (0..n)
        .filter(|&i| probs[i] >= 0.05)
        .map(|i| (i, probs[i], clamp(anchors[i].to_box())))
        .collect();
    let kept = nms_oracle(&cands, 0.45);

    assert_eq!(dets.len(), kept.len());
    for (d, &k) in dets.iter().zip(&kept) {
        assert!((d.score - cands[k].1).abs() < 1e-12);
        assert_eq!(d.rect, cands[k].2);
    }
}

#[test]
fn nms_is_independent_of_candidate_ordering() {
    // scores distinct: shuffling the anchor enumeration cannot change the
    // surviving set (the tie-break is (score desc, anchor idx asc))
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let cands: Vec<(usize, f64, BoxPx)> = (0..8)
            .map(|i| {
                let x1 = rng.gen_range(0.0..40.0);
                let y1 = rng.gen_range(0.0..40.0);
                (
                    i,
                    rng.gen_range(0.1..1.0),
                    BoxPx::new(x1, y1, x1 + rng.gen_range(5.0..20.0), y1 + rng.gen_range(5.0..20.0)),
                )
            })
            .collect();
        let base: Vec<BoxPx> = nms_oracle(&cands, 0.45).iter().map(|&i| cands[i].2).collect();
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rng);
        // re-index by new positions but keep (score, box) pairs
        let reindexed: Vec<(usize, f64, BoxPx)> = shuffled
            .iter()
            .enumerate()
            .map(|(i, &(_, s, b))| (i, s, b))
            .collect();
        let again: Vec<BoxPx> =
            nms_oracle(&reindexed, 0.45).iter().map(|&i| reindexed[i].2).collect();
        assert_eq!(base, again);
    }
}

/// Oracle: AP = (1/n_gt) * sum over TPs of the best precision at or after
/// that TP's rank — a different formulation of the all-point envelope.
fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let n = flags.len();
    let prec_at = |rank: usize| {
        let hits = flags[..=rank].iter().filter(|&&t| t).count();
        hits as f64 / (rank + 1) as f64
    };
    let mut total = 0.0;
    for i in 0..n {
        if flags[i] {
            let mut best = 0.0f64;
            for j in i..n {
                best = best.max(prec_at(j));
            }
            total += best;
        }
    }
    total / n_gt as f64
}

#[test]
fn eval_map_fixture_vs_pr_oracle() {
    // 3 detections / 2 GTs of one class: TP, FP, TP in score order
    let gts = vec![vec![
        GtBox { class: 0, rect: BoxPx::new(0.0, 0.0, 10.0, 10.0) },
        GtBox { class: 0, rect: BoxPx::new(30.0, 30.0, 40.0, 40.0) },
    ]];
    let dets = vec![vec![
        Detection { class: 0, score: 0.9, rect: BoxPx::new(1.0, 0.0, 10.0, 10.0) },
        Detection { class: 0, score: 0.7, rect: BoxPx::new(15.0, 15.0, 25.0, 25.0) },
        Detection { class: 0, score: 0.5, rect: BoxPx::new(30.0, 31.0, 40.0, 40.0) },
    ]];
    let rep = eval_map(&dets, &gts, 1, 0.5).unwrap();
    let want = ap_oracle(&[true, false, true], 2);
    assert!((rep.map - want).abs() < 1e-12, "{} vs {want}", rep.map);
    // by hand: precisions 1, 1/2, 2/3; envelope makes AP = (1 + 2/3)/2
    assert!((rep.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn eval_map_randomized_vs_pr_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let n_gt = rng.gen_range(1..5);
        let gts = vec![(0..n_gt)
            .map(|i| GtBox {
                class: 0,
                rect: BoxPx::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0),
            })
            .collect::<Vec<_>>()];
        let n_det = rng.gen_range(1..7);
        let dets = vec![(0..n_det)
            .map(|_| {
                let which = rng.gen_range(0..n_gt + 2);
                let (x, jitter) = if which < n_gt {
                    (which as f64 * 20.0, rng.gen_range(0.0..2.0))
                } else {
                    (100.0 + rng.gen_range(0.0..50.0), 0.0)
                };
                Detection {
                    class: 0,
                    score: rng.gen_range(0.01..1.0),
                    rect: BoxPx::new(x + jitter, 0.0, x + 10.0, 10.0),
                }
            })
            .collect::<Vec<_>>()];
        let rep = eval_map(&dets, &gts, 1, 0.5).unwrap();

        // oracle recomputes the greedy match independently
        let mut order: Vec<usize> = (0..dets[0].len()).collect();
        order.sort_by(|&a, &b| dets[0][b].score.partial_cmp(&dets[0][a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; n_gt];
        let mut flags = Vec::new();
        for &d in &order {
            let mut best = 0.0;
            let mut arg = None;
            for (j, g) in gts[0].iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&dets[0][d].rect, &g.rect);
                if v > best {
                    best = v;
                    arg = Some(j);
                }
            }
            if let Some(j) = arg {
                if best >= 0.5 {
                    used[j] = true;
                    flags.push(true);
                    continue;
                }
            }
            flags.push(false);
        }
        let want = ap_oracle(&flags, n_gt);
        assert!((rep.map - want).abs() < 1e-12, "{} vs {want}", rep.map);
        assert!((0.0..=1.0).contains(&rep.map));
    }
}
