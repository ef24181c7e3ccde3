//! Metrics against brute-force reimplementations and external reference
//! values, plus property tests of their invariants.

use maskstrike::detector::{nms, Detection, DetectionSet};
use maskstrike::downstream::{bleu_n, rouge_l, rouge_l_corpus};
use maskstrike::geometry::{iou, BBox, BinaryMask, Image};
use maskstrike::metrics::{delta, l2_per_image_size, map_outside_mask, ssim};
use maskstrike::seed::SeedKey;
use proptest::prelude::*;
use rand::Rng;

const INSTANCES: u64 = 60;

fn int_box(rng: &mut impl Rng, max: i32) -> BBox {
    let x1 = rng.gen_range(0..max - 1);
    let y1 = rng.gen_range(0..max - 1);
    let x2 = rng.gen_range(x1 + 1..=max);
    let y2 = rng.gen_range(y1 + 1..=max);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// IoU by counting unit cells of integer boxes.
fn iou_cells(a: &BBox, b: &BBox, max: i32) -> f64 {
    let inside = |bx: &BBox, x: i32, y: i32| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx > bx.x1 && cx < bx.x2 && cy > bx.y1 && cy < bx.y2
    };
    let (mut inter, mut union) = (0, 0);
    for y in 0..max {
        for x in 0..max {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i32;
            union += (ia || ib) as i32;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_matches_cell_count() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(1).with_u64(i).rng();
        let (a, b) = (int_box(&mut rng, 20), int_box(&mut rng, 20));
        let got = iou(&a, &b).unwrap();
        assert!((got - iou_cells(&a, &b, 20)).abs() < 1e-12, "{a:?} {b:?}");
    }
}

/// Greedy suppression written as repeated extraction of the best survivor.
fn nms_oracle(c: &[(BBox, f64)], t: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..c.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if c[i].1 > c[best].1 || (c[i].1 == c[best].1 && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou(&c[i].0, &c[best].0).unwrap() <= t);
    }
    kept
}

#[test]
fn nms_matches_oracle() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(2).with_u64(i).rng();
        let n = rng.gen_range(1..25);
        // coarse scores so ties occur
        let c: Vec<(BBox, f64)> = (0..n)
            .map(|_| (int_box(&mut rng, 16), f64::from(rng.gen_range(0..6u8)) / 5.0))
            .collect();
        let t = [0.3, 0.5, 0.7][i as usize % 3];
        assert_eq!(nms(&c, t), nms_oracle(&c, t), "instance {i}");
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _, _| f64::from(rng.gen_range(0..=255u8)))
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.3));
    if m.pixel_count() == 0 {
        BinaryMask::full(h, w)
    } else {
        m
    }
}

fn sq_diff_sum(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                s += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
            }
        }
    }
    s
}

#[test]
fn delta_and_l2_match_oracle() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(3).with_u64(i).rng();
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (a, b) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let m = random_mask(&mut rng, h, w);
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                count += m.get(y, x) as usize;
            }
        }
        let norm = sq_diff_sum(&a, &b).sqrt();
        assert!((delta(&a, &b, &m).unwrap() - norm / count as f64).abs() < 1e-9);
        assert!((l2_per_image_size(&a, &b).unwrap() - norm / (h * w) as f64).abs() < 1e-9);
    }
}

/// SSIM with a direct (non-separable) 11×11 window sum at every valid position.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.shape();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (6.5025, 58.5225);
    let mut total = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut n = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy] * g[dx] / norm;
                        let (p, q) = (a.get(y0 + dy, x0 + dx, c), b.get(y0 + dy, x0 + dx, c));
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_direct_window_sum() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(4).with_u64(i).rng();
        let (h, w) = (rng.gen_range(11..20), rng.gen_range(11..20));
        let a = random_image(&mut rng, h, w);
        // mix of near-identical and unrelated pairs
        let b = if i % 2 == 0 {
            Image::from_fn(h, w, |y, x, c| (a.get(y, x, c) + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0))
        } else {
            random_image(&mut rng, h, w)
        };
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9, "instance {i}");
    }
}

/// `(height, width, seed, value)` from scikit-image's `structural_similarity`
/// with `gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
/// data_range=255, channel_axis=2` on the images of [`reference_pair`].
const SKIMAGE_SSIM: [(usize, usize, i64, f64); 6] = [
    (16, 16, 0, 0.910954732519),
    (20, 24, 1, 0.905370097654),
    (32, 17, 2, 0.902475612943),
    (11, 11, 3, 0.894448210281),
    (40, 40, 4, 0.899965563453),
    (23, 31, 5, 0.899438606541),
];

fn reference_pair(h: usize, w: usize, s: i64) -> (Image, Image) {
    let a = Image::from_fn(h, w, |y, x, c| {
        let (y, x, c) = (y as i64, x as i64, c as i64);
        ((37 * y + 11 * x + 71 * c + 13 * x * y * (c + 1) + 29 * s) % 256) as f64
    });
    let b = Image::from_fn(h, w, |y, x, c| {
        let (yi, xi, ci) = (y as i64, x as i64, c as i64);
        let noise = (5 * yi * yi + 17 * xi + 31 * ci + 7 * s + xi * yi) % 121 - 60;
        (a.get(y, x, c) + noise as f64).clamp(0.0, 255.0)
    });
    (a, b)
}

#[test]
fn ssim_matches_external_reference() {
    for (h, w, s, want) in SKIMAGE_SSIM {
        let (a, b) = reference_pair(h, w, s);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-3, "{h}x{w}: {got} vs {want}");
    }
}

fn words(rng: &mut impl Rng, n: usize) -> Vec<String> {
    const V: [&str; 6] = ["a", "red", "circle", "and", "blue", "square"];
    (0..n).map(|_| V[rng.gen_range(0..V.len())].to_string()).collect()
}

/// BLEU with n-grams counted by explicit scans.
fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let count = |s: &[String], g: &[String]| (0..s.len().saturating_sub(g.len() - 1)).filter(|&i| s[i..i + g.len()] == *g).count();
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut hit, mut total) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            if c.len() < order {
                continue;
            }
            total += c.len() + 1 - order;
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=c.len() - order {
                let g = &c[i..i + order];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                hit += count(c, g).min(count(r, g));
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / total as f64).ln() / n as f64;
    }
    let cl: usize = cands.iter().map(Vec::len).sum();
    let rl: usize = refs.iter().map(Vec::len).sum();
    let bp = if cl > rl { 1.0 } else { (1.0 - rl as f64 / cl as f64).exp() };
    bp * log_p.exp()
}

#[test]
fn bleu_matches_oracle() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(5).with_u64(i).rng();
        let m = rng.gen_range(1..5);
        let cands: Vec<Vec<String>> = (0..m).map(|_| { let n = rng.gen_range(1..9); words(&mut rng, n) }).collect();
        let refs: Vec<Vec<String>> = (0..m).map(|_| { let n = rng.gen_range(1..9); words(&mut rng, n) }).collect();
        for n in 1..=4 {
            let got = bleu_n(&cands, &refs, n).unwrap();
            let want = bleu_oracle(&cands, &refs, n);
            assert!((got - want).abs() < 1e-12, "instance {i} order {n}: {got} vs {want}");
        }
    }
}

/// Longest common subsequence by enumerating candidate subsequences.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|s| it.any(|t| t == *s)) {
            best = sub.len();
        }
    }
    best
}

#[test]
fn rouge_l_matches_oracle() {
    for i in 0..INSTANCES {
        let mut rng = SeedKey::new(6).with_u64(i).rng();
        let (n, m) = (rng.gen_range(1..11), rng.gen_range(1..11));
        let (c, r) = (words(&mut rng, n), words(&mut rng, m));
        let l = lcs_brute(&c, &r) as f64;
        let want = if l == 0.0 { 0.0 } else { 2.0 * l * l / (l * (c.len() + r.len()) as f64) };
        assert!((rouge_l(&c, &r) - want).abs() < 1e-12, "{c:?} {r:?}");
    }
}

fn image_pair(h: usize, w: usize) -> impl Strategy<Value = (Image, Image)> {
    let n = h * w * 3;
    (prop::collection::vec(0.0..=255.0f64, n), prop::collection::vec(0.0..=255.0f64, n)).prop_map(move |(a, b)| {
        (Image::from_vec(h, w, a).unwrap(), Image::from_vec(h, w, b).unwrap())
    })
}

fn caption_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "red", "circle", "and", "on", "blue"]), 4..10)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perturbation_metrics_are_symmetric((a, b) in image_pair(12, 13), bits in prop::collection::vec(any::<bool>(), 12 * 13)) {
        let m = BinaryMask::from_fn(12, 13, |y, x| bits[y * 13 + x] || (y, x) == (0, 0));
        prop_assert!((delta(&a, &b, &m).unwrap() - delta(&b, &a, &m).unwrap()).abs() < 1e-9);
        prop_assert!((l2_per_image_size(&a, &b).unwrap() - l2_per_image_size(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(delta(&a, &b, &m).unwrap() >= 0.0);
    }

    #[test]
    fn ssim_identity_and_symmetry((a, b) in image_pair(12, 14)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-9);
        prop_assert!(s1 <= 1.0 + 1e-9 && s1 >= -1.0 - 1e-9);
    }

    #[test]
    fn iou_bounds(x in 0.0..50.0f64, y in 0.0..50.0f64, w in 1.0..30.0f64, h in 1.0..30.0f64,
                  u in 0.0..50.0f64, v in 0.0..50.0f64, p in 1.0..30.0f64, q in 1.0..30.0f64) {
        let a = BBox::new(x, y, x + w, y + h);
        let b = BBox::new(u, v, u + p, v + q);
        let (i1, i2) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert!((i1 - i2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&i1));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn map_of_identical_detections_is_perfect(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeedKey::new(seed).rng();
        let dets: Vec<Detection> = (0..n).map(|i| {
            let bbox = BBox::new(i as f64 * 30.0, 0.0, i as f64 * 30.0 + 20.0, 20.0);
            let mut probs = vec![0.02; 4];
            probs[rng.gen_range(1..4)] = 0.94;
            Detection { bbox, class_probs: probs, objectness: rng.gen_range(0.5..1.0) }
        }).collect();
        let set = DetectionSet { detections: dets, class_vocab: (0..4).map(|i| format!("c{i}")).collect() };
        let mask = BinaryMask::empty(40, 200);
        prop_assert_eq!(map_outside_mask(&set, &set, &mask, Some(0)), Some(100.0));
    }

    #[test]
    fn caption_scores_identity_and_order(caps in prop::collection::vec((caption_strategy(), caption_strategy()), 1..6), rot in 0usize..6) {
        let (c, r): (Vec<_>, Vec<_>) = caps.into_iter().unzip();
        for n in 1..=4 {
            prop_assert!((bleu_n(&r, &r, n).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert!((rouge_l_corpus(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        let k = rot % c.len();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(k);
        r2.rotate_left(k);
        for n in 1..=4 {
            prop_assert!((bleu_n(&c, &r, n).unwrap() - bleu_n(&c2, &r2, n).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rouge_l_corpus(&c, &r).unwrap() - rouge_l_corpus(&c2, &r2).unwrap()).abs() < 1e-12);
    }
}
