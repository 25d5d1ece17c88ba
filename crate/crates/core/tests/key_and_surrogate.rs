use candle_core::{Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringlab_core::nn::cross_entropy;
use ringlab_core::surrogate::{classify, Features, SurrogateConfig, SurrogateMode, SurrogateModel};
use ringlab_core::tensor::{gaussian_vec, Domain, SpatialTensor};
use ringlab_core::watermark::{embed_key, extract_key, generate_key, latent_distances, rounded_radius};

fn latents(seed: u64, c: usize, h: usize, w: usize) -> SpatialTensor {
    SpatialTensor::gaussian((c, h, w), &[seed, seed + 1], Domain::Latent).unwrap()
}

fn lattice_count(h: usize, w: usize, radii: &[usize]) -> usize {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt().round() as usize;
            n += usize::from(radii.contains(&r));
        }
    }
    n
}

#[test]
fn mask_matches_lattice_enumeration() {
    let key = generate_key((4, 16, 16), &[3, 5, 7], 3, 1).unwrap();
    assert_eq!(key.mask().iter().filter(|&&m| m).count(), lattice_count(16, 16, &[3, 5, 7]));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = SurrogateConfig { mode: SurrogateMode::Spectrum, width: 4, depth: 1, ..Default::default() };
    let model = SurrogateModel::new(cfg, (2, 8, 8)).unwrap();
    let re = gaussian_vec(5, 2 * 2 * 64);
    let im = gaussian_vec(6, 2 * 2 * 64);
    let labels = [1u32, 0];
    let dev = candle_core::Device::Cpu;
    let im_t = Tensor::from_vec(im.clone(), (2, 2, 8, 8), &dev).unwrap();
    let logits_at = |re: &[f32]| -> Vec<Vec<f64>> {
        let f = Features { re: Tensor::from_vec(re.to_vec(), (2, 2, 8, 8), &dev).unwrap(), im: Some(im_t.clone()) };
        let l = classify(&model, &f).unwrap().logits.to_vec2::<f32>().unwrap();
        l.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
    };
    // cross-entropy of the f32 logits, evaluated in f64
    let loss_of = |logits: &[Vec<f64>]| -> f64 {
        let per_item = logits.iter().zip(&labels).map(|(l, &y)| {
            let m = l[0].max(l[1]);
            m + ((l[0] - m).exp() + (l[1] - m).exp()).ln() - l[y as usize]
        });
        per_item.sum::<f64>() / labels.len() as f64
    };
    let var = Var::from_vec(re.clone(), (2, 2, 8, 8), &dev).unwrap();
    let f = Features { re: var.as_tensor().clone(), im: Some(im_t.clone()) };
    let loss = cross_entropy(&classify(&model, &f).unwrap().logits, &labels).unwrap();
    let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();

    let h = 2e-2f32;
    let base = logits_at(&re);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for _ in 0..2000 {
        let i = rng.random_range(0..re.len());
        if g[i].abs() < 1e-4 {
            continue;
        }
        let (mut up, mut down) = (re.clone(), re.clone());
        up[i] += h;
        down[i] -= h;
        let (lu, ld) = (logits_at(&up), logits_at(&down));
        // the logits are piecewise linear: skip intervals that cross a ReLU kink
        let curvature = (0..2).flat_map(|b| (0..2).map(move |k| (b, k))).map(|(b, k)| (lu[b][k] - 2.0 * base[b][k] + ld[b][k]).abs()).fold(0.0, f64::max);
        if curvature > 1e-6 {
            continue;
        }
        let fd = (loss_of(&lu) - loss_of(&ld)) / (2.0 * f64::from(h));
        let an = f64::from(g[i]);
        let rel = (fd - an).abs() / an.abs();
        assert!(rel < 1e-3, "coordinate {i}: analytic {an} numeric {fd} rel {rel}");
        checked += 1;
        if checked == 5 {
            break;
        }
    }
    assert_eq!(checked, 5, "too few kink-free coordinates");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_cardinality_is_lattice_count(r1 in 0usize..3, gap in 1usize..3, n in 1usize..3, side in prop::sample::select(vec![8usize, 12, 16])) {
        let radii: Vec<usize> = (0..n).map(|i| r1 + i * gap).filter(|r| 2 * r < side).collect();
        prop_assume!(!radii.is_empty());
        let key = generate_key((2, side, side), &radii, 1, 3).unwrap();
        prop_assert_eq!(key.mask().iter().filter(|&&m| m).count(), lattice_count(side, side, &radii));
        for (p, &m) in key.mask().iter().enumerate() {
            prop_assert_eq!(m, radii.contains(&rounded_radius(p / side, p % side, side, side)));
        }
    }

    #[test]
    fn embedding_is_local_idempotent_and_readable(seed in 0u64..100_000, key_seed in 0u64..1000, channel in 0usize..4) {
        let key = generate_key((4, 16, 16), &[1, 2, 3], channel, key_seed).unwrap();
        let x = latents(seed, 4, 16, 16);
        let y = embed_key(&x, &key).unwrap();
        let (xv, yv) = (x.to_vec().unwrap(), y.to_vec().unwrap());
        for i in 0..2 {
            for c in (0..4).filter(|&c| c != channel) {
                let off = (i * 4 + c) * 256;
                prop_assert_eq!(&xv[off..off + 256], &yv[off..off + 256]);
            }
        }
        let twice = embed_key(&y, &key).unwrap();
        prop_assert!(twice.max_abs_diff(&y).unwrap() <= 1e-5);
        let targets = key.targets();
        for item in extract_key(&y, &key).unwrap() {
            for (a, b) in item.iter().zip(&targets) {
                prop_assert!((a - b).norm() <= 1e-4);
            }
        }
        let d = latent_distances(&y, &key).unwrap();
        prop_assert!(d.iter().all(|&v| v <= 1e-4));
    }

    #[test]
    fn watermarked_latents_score_closer_than_clean(seed in 0u64..100_000) {
        let key = generate_key((4, 16, 16), &[1, 2, 3], 3, 42).unwrap();
        let x = latents(seed, 4, 16, 16);
        let wm = latent_distances(&embed_key(&x, &key).unwrap(), &key).unwrap();
        let clean = latent_distances(&x, &key).unwrap();
        for (w, c) in wm.iter().zip(&clean) {
            prop_assert!(w < c);
        }
    }
}
