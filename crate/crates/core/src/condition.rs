//! Non-image conditioning: sinusoidal embeddings of tile-center coordinates
//! and diffusion timestep, their fused projection, and a hashed caption
//! embedding.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};

/// Frequency base for coordinate embeddings.
pub const METADATA_BASE: f64 = 1000.0;

/// Frequency base for timestep embeddings.
pub const TIMESTEP_BASE: f64 = 10000.0;

/// `[sin(m w_0), cos(m w_0), sin(m w_1), ...]` with `w_i = base^(-2i/d)`.
pub fn sinusoidal_embed(m: f64, d: usize, base: f64) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {d} must be even and positive"
        )));
    }
    if base <= 1.0 {
        return Err(Error::InvalidArgument(format!("frequency base {base} must exceed 1")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (m * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Widths of the coordinate/timestep projection networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Sinusoidal embedding dimension.
    pub embed_dim: usize,
    /// Output (conditioning) width; also the hidden width.
    pub cond_width: usize,
}

/// Which modalities feed the fused vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaTime {
    /// `(lon, lat)` in degrees, or `None` to drop the metadata terms.
    pub coords: Option<(f64, f64)>,
    pub timestep: f64,
}

const BRANCHES: [&str; 3] = ["lon", "lat", "time"];

/// Registers the three two-layer projection networks under `prefix`.
pub fn init_projections<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: ProjectionConfig,
    rng: &mut R,
) {
    for branch in BRANCHES {
        let p = format!("{prefix}.{branch}");
        store.insert(&format!("{p}.l1.w"), normal(&[cfg.cond_width, cfg.embed_dim], rng));
        store.insert(&format!("{p}.l1.b"), Tensor::zeros(&[cfg.cond_width]));
        store.insert(&format!("{p}.l2.w"), normal(&[cfg.cond_width, cfg.cond_width], rng));
        store.insert(&format!("{p}.l2.b"), Tensor::zeros(&[cfg.cond_width]));
    }
}

/// LeCun-normal init, `N(0, 1/fan_in)`.
pub(crate) fn normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

fn project(g: &mut Graph, prefix: &str, branch: &str, embedding: Vec<f64>) -> Result<NodeId> {
    let p = format!("{prefix}.{branch}");
    let x = g.input(Tensor::vector(embedding));
    let (w, b) = (g.named(&format!("{p}.l1.w"))?, g.named(&format!("{p}.l1.b"))?);
    let h = g.linear(x, w, b)?;
    let h = g.silu(h);
    let (w, b) = (g.named(&format!("{p}.l2.w"))?, g.named(&format!("{p}.l2.b"))?);
    g.linear(h, w, b)
}

/// Records `MLP_lon(embed(lon)) + MLP_lat(embed(lat)) + MLP_t(embed(t))` on
/// the graph. Dropped metadata contributes a zero vector.
pub fn fuse_metadata_timestep(
    g: &mut Graph,
    prefix: &str,
    cfg: ProjectionConfig,
    input: MetaTime,
) -> Result<NodeId> {
    let check = |name: &str| -> Result<()> {
        let w = g
            .params()
            .by_name(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name}")))?;
        if w.shape() != [cfg.cond_width, cfg.embed_dim] {
            return Err(Error::Shape(format!(
                "{name} is {:?}, expected [{}, {}]",
                w.shape(),
                cfg.cond_width,
                cfg.embed_dim
            )));
        }
        Ok(())
    };
    for branch in BRANCHES {
        check(&format!("{prefix}.{branch}.l1.w"))?;
    }
    let t_emb = sinusoidal_embed(input.timestep, cfg.embed_dim, TIMESTEP_BASE)?;
    let mut acc = project(g, prefix, "time", t_emb)?;
    if let Some((lon, lat)) = input.coords {
        let lon_p = project(g, prefix, "lon", sinusoidal_embed(lon, cfg.embed_dim, METADATA_BASE)?)?;
        let lat_p = project(g, prefix, "lat", sinusoidal_embed(lat, cfg.embed_dim, METADATA_BASE)?)?;
        let meta = g.add(lon_p, lat_p)?;
        acc = g.add(meta, acc)?;
    }
    Ok(acc)
}

/// Evaluates [`fuse_metadata_timestep`] without keeping the graph.
pub fn fused_vector(
    store: &ParamStore,
    prefix: &str,
    cfg: ProjectionConfig,
    input: MetaTime,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let out = fuse_metadata_timestep(&mut g, prefix, cfg, input)?;
    Ok(g.value(out).data().to_vec())
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature-hashing bag of tokens, L2-normalized. The bucket comes from
/// the first eight bytes of the token's SHA-256, the sign from the ninth.
pub fn embed_caption(text: &str, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    if d == 0 {
        return v;
    }
    for token in tokenize(text) {
        let digest = Sha256::digest(token.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % d as u64;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGrads;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CFG: ProjectionConfig = ProjectionConfig {
        embed_dim: 8,
        cond_width: 6,
    };

    #[test]
    fn zero_input_embedding() {
        let e = sinusoidal_embed(0.0, 16, METADATA_BASE).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn rejects_odd_dim_and_small_base() {
        assert!(sinusoidal_embed(1.0, 7, 1000.0).is_err());
        assert!(sinusoidal_embed(1.0, 8, 1.0).is_err());
    }

    #[test]
    fn integer_degrees_embed_distinctly() {
        let embs: Vec<Vec<f64>> = (-180..=180)
            .map(|m| sinusoidal_embed(f64::from(m), 64, METADATA_BASE).unwrap())
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn zero_weights_leave_bias_sum() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_projections(&mut store, "c", CFG, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = store.get_mut(id);
            if name.ends_with(".w") {
                t.fill(0.0);
            } else if name.ends_with("l2.b") {
                let k = if name.contains("lon") { 1.0 } else if name.contains("lat") { 10.0 } else { 100.0 };
                t.fill(k);
            }
        }
        for input in [
            MetaTime { coords: Some((13.0, 52.0)), timestep: 999.0 },
            MetaTime { coords: Some((-70.0, 10.0)), timestep: 3.0 },
        ] {
            let v = fused_vector(&store, "c", CFG, input).unwrap();
            assert!(v.iter().all(|x| *x == 111.0));
        }
    }

    #[test]
    fn summation_order_is_irrelevant() {
        let mut store = ParamStore::default();
        init_projections(&mut store, "c", CFG, &mut ChaCha8Rng::seed_from_u64(5));
        let fused = fused_vector(
            &store,
            "c",
            CFG,
            MetaTime { coords: Some((120.2, 30.3)), timestep: 250.0 },
        )
        .unwrap();
        // lat + lon + t evaluated branch by branch in the opposite order.
        let branch = |name: &str, m: f64, base: f64| {
            let mut g = Graph::new(&store);
            let out = project(&mut g, "c", name, sinusoidal_embed(m, 8, base).unwrap()).unwrap();
            g.value(out).data().to_vec()
        };
        let lat = branch("lat", 30.3, METADATA_BASE);
        let lon = branch("lon", 120.2, METADATA_BASE);
        let t = branch("time", 250.0, TIMESTEP_BASE);
        for i in 0..6 {
            let swapped = (lat[i] + lon[i]) + t[i];
            assert!((swapped - fused[i]).abs() < 1e-12);
        }
    }

    /// Identity projections at lon = lat = t = 0: each branch yields
    /// silu([0, 1, 0, 1, ...]), so the sum is 3 * silu(1) on odd entries.
    #[test]
    fn identity_projections_closed_form() {
        let cfg = ProjectionConfig { embed_dim: 4, cond_width: 4 };
        let mut store = ParamStore::default();
        init_projections(&mut store, "c", cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let eye = Tensor::from_vec(
            &[4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        for b in BRANCHES {
            for l in ["l1", "l2"] {
                store.insert(&format!("c.{b}.{l}.w"), eye.clone());
            }
        }
        let v = fused_vector(&store, "c", cfg, MetaTime { coords: Some((0.0, 0.0)), timestep: 0.0 })
            .unwrap();
        let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 3.0 * silu1).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
        assert!((v[3] - 3.0 * silu1).abs() < 1e-15);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut store = ParamStore::default();
        init_projections(&mut store, "c", CFG, &mut ChaCha8Rng::seed_from_u64(1));
        let bad = ProjectionConfig { embed_dim: 10, cond_width: 6 };
        let r = fused_vector(&store, "c", bad, MetaTime { coords: None, timestep: 1.0 });
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut store = ParamStore::default();
        init_projections(&mut store, "c", CFG, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for id in store.clone().ids() {
            if store.name(id).ends_with(".b") {
                *store.get_mut(id) = normal(&[CFG.cond_width, 1], &mut rng);
                let data = store.get(id).data().to_vec();
                *store.get_mut(id) = Tensor::vector(data);
            }
        }
        let probe = Tensor::vector((0..6).map(|i| (i as f64 * 0.7).sin()).collect());
        let input = MetaTime { coords: Some((8.54, 47.37)), timestep: 321.0 };
        let loss = |s: &ParamStore, grads: Option<&mut ParamGrads>| {
            let mut g = Graph::new(s);
            let c = fuse_metadata_timestep(&mut g, "c", CFG, input).unwrap();
            let l = g.dot(c, probe.clone()).unwrap();
            if let Some(gr) = grads {
                g.backward(l, gr).unwrap();
            }
            g.value(l).data()[0]
        };
        let mut grads = ParamGrads::zeros_like(&store);
        loss(&store, Some(&mut grads));
        let h = 1e-5;
        for id in store.ids() {
            for j in 0..store.get(id).len() {
                let mut p = store.clone();
                p.get_mut(id).data_mut()[j] += h;
                let mut m = store.clone();
                m.get_mut(id).data_mut()[j] -= h;
                let fd = (loss(&p, None) - loss(&m, None)) / (2.0 * h);
                let an = grads.get(id).data()[j];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{}[{j}] {an} vs {fd}", store.name(id));
            }
        }
    }

    #[test]
    fn caption_embedding_basics() {
        assert!(embed_caption("", 32).iter().all(|x| *x == 0.0));
        assert!(embed_caption(" ,;! ", 32).iter().all(|x| *x == 0.0));
        let a = embed_caption("Dense grid of Houses", 64);
        assert_eq!(a, embed_caption("dense GRID of houses", 64));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    /// Regression fixture: the two city names share no hash bucket at d=256.
    #[test]
    fn distinct_city_names_are_dissimilar() {
        let ny = embed_caption("new york", 256);
        let jk = embed_caption("jakarta", 256);
        let c = cosine(&ny, &jk);
        assert!(c < 0.5);
        assert_eq!(c, 0.0);
    }

    proptest! {
        #[test]
        fn embedding_norm_is_half_dim(m in -1.0e4f64..1.0e4, half in 1usize..64) {
            let d = 2 * half;
            let e = sinusoidal_embed(m, d, METADATA_BASE).unwrap();
            let n: f64 = e.iter().map(|x| x * x).sum();
            prop_assert!((n - d as f64 / 2.0).abs() < 1e-9);
        }

        #[test]
        fn caption_embedding_ignores_token_order(
            mut words in proptest::collection::vec("[a-z]{1,8}", 0..12),
            seed in 0u64..1000,
        ) {
            let a = embed_caption(&words.join(" "), 128);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..words.len()).rev() {
                let j = rand::Rng::random_range(&mut rng, 0..=i);
                words.swap(i, j);
            }
            let b = embed_caption(&words.join(", "), 128);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
