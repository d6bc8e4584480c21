//! Top-k / rand-k sparsifiers, the index-value payload codec, and the
//! coverage-weighted aggregation that averages each coordinate only over
//! the clients that actually transmitted it.

use byteorder::{ByteOrder, LittleEndian};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::ModelVector;

/// `k` index-value pairs of a `d`-dimensional vector, indices ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePayload {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

impl SparsePayload {
    /// Builds a payload from arbitrary-order pairs, canonicalizing to
    /// ascending indices. Rejects duplicates and out-of-range indices.
    pub fn new(pairs: Vec<(u32, f64)>, dim: usize) -> Result<Self> {
        let mut pairs = pairs;
        pairs.sort_by_key(|(i, _)| *i);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(FedError::CorruptPayload("duplicate index".into()));
        }
        if let Some((i, _)) = pairs.last() {
            if *i as usize >= dim {
                return Err(FedError::CorruptPayload(format!("index {i} out of range for d = {dim}")));
            }
        }
        let (indices, values) = pairs.into_iter().unzip();
        Ok(SparsePayload { indices, values, dim })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of retained entries `k`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Wire layout: `[d: u32][k: u32][indices: k × u32][values: k × f32]`,
    /// little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let k = self.len();
        let mut buf = vec![0u8; 8 + 8 * k];
        LittleEndian::write_u32(&mut buf[0..4], self.dim as u32);
        LittleEndian::write_u32(&mut buf[4..8], k as u32);
        LittleEndian::write_u32_into(&self.indices, &mut buf[8..8 + 4 * k]);
        let values: Vec<f32> = self.values.iter().map(|v| *v as f32).collect();
        LittleEndian::write_f32_into(&values, &mut buf[8 + 4 * k..]);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FedError::CorruptPayload("truncated header".into()));
        }
        let dim = LittleEndian::read_u32(&bytes[0..4]) as usize;
        let k = LittleEndian::read_u32(&bytes[4..8]) as usize;
        if bytes.len() != 8 + 8 * k {
            return Err(FedError::CorruptPayload(format!(
                "expected {} bytes for k = {k}, got {}",
                8 + 8 * k,
                bytes.len()
            )));
        }
        let mut indices = vec![0u32; k];
        LittleEndian::read_u32_into(&bytes[8..8 + 4 * k], &mut indices);
        let mut values = vec![0f32; k];
        LittleEndian::read_f32_into(&bytes[8 + 4 * k..], &mut values);
        let payload = SparsePayload {
            indices,
            values: values.into_iter().map(f64::from).collect(),
            dim,
        };
        payload.check()?;
        Ok(payload)
    }

    fn check(&self) -> Result<()> {
        if self.indices.len() != self.values.len() || self.indices.len() > self.dim {
            return Err(FedError::CorruptPayload("length mismatch".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FedError::CorruptPayload("indices not strictly ascending".into()));
        }
        if let Some(&i) = self.indices.last() {
            if i as usize >= self.dim {
                return Err(FedError::CorruptPayload(format!("index {i} out of range for d = {}", self.dim)));
            }
        }
        Ok(())
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(FedError::invalid(format!("k must lie in [1, {d}], got {k}")));
    }
    Ok(())
}

fn gather(y: &ModelVector, mut idx: Vec<usize>) -> SparsePayload {
    idx.sort_unstable();
    SparsePayload {
        values: idx.iter().map(|&i| y[i]).collect(),
        indices: idx.into_iter().map(|i| i as u32).collect(),
        dim: y.len(),
    }
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
pub fn top_k(y: &ModelVector, k: usize) -> Result<SparsePayload> {
    check_k(k, y.len())?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    let by_magnitude = |a: &usize, b: &usize| y[*b].abs().total_cmp(&y[*a].abs()).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_magnitude);
        order.truncate(k);
    }
    Ok(gather(y, order))
}

/// Keeps `k` entries drawn uniformly without replacement.
pub fn rand_k<R: Rng + ?Sized>(y: &ModelVector, k: usize, rng: &mut R) -> Result<SparsePayload> {
    check_k(k, y.len())?;
    Ok(gather(y, index::sample(rng, y.len(), k).into_vec()))
}

/// Zero-pads a payload back to its full dimension.
pub fn densify(p: &SparsePayload) -> Result<ModelVector> {
    p.check()?;
    let mut out = ModelVector::zeros(p.dim);
    for (&i, &v) in p.indices.iter().zip(&p.values) {
        out[i as usize] = v;
    }
    Ok(out)
}

/// Per-coordinate contributor counts, floored at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(pub Vec<f64>);

pub fn aggregation_weights(payloads: &[SparsePayload], d: usize) -> Result<AggregationWeights> {
    let mut counts = vec![0u32; d];
    for p in payloads {
        if p.dim != d {
            return Err(FedError::invalid(format!("payload dimension {} != {d}", p.dim)));
        }
        for &i in &p.indices {
            counts[i as usize] += 1;
        }
    }
    Ok(AggregationWeights(counts.into_iter().map(|c| f64::from(c.max(1))).collect()))
}

/// Sum of zero-padded payloads divided element-wise by coverage counts.
pub fn sparse_aggregate(payloads: &[SparsePayload], d: usize) -> Result<ModelVector> {
    let weights = aggregation_weights(payloads, d)?;
    let mut sum = ModelVector::zeros(d);
    for p in payloads {
        p.check()?;
        for (&i, &v) in p.indices.iter().zip(&p.values) {
            sum[i as usize] += v;
        }
    }
    for (s, w) in sum.iter_mut().zip(&weights.0) {
        *s /= w;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::from_vec(v.to_vec())
    }

    #[test]
    fn top_k_picks_largest_magnitudes() {
        let p = top_k(&mv(&[0.1, -3.0, 2.0, 0.5]), 2).unwrap();
        assert_eq!(p.indices(), &[1, 2]);
        assert_eq!(p.values(), &[-3.0, 2.0]);
    }

    #[test]
    fn top_k_full_and_ties() {
        let y = mv(&[0.3, -0.2, 9.0]);
        let p = top_k(&y, 3).unwrap();
        assert_eq!(densify(&p).unwrap(), y);
        let tie = top_k(&mv(&[1.0, -1.0, 1.0, -1.0]), 2).unwrap();
        assert_eq!(tie.indices(), &[0, 1]);
        assert!(top_k(&y, 0).is_err());
        assert!(top_k(&y, 4).is_err());
    }

    #[test]
    fn rand_k_full_and_deterministic() {
        let y = mv(&[4.0, 5.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(densify(&rand_k(&y, 3, &mut rng).unwrap()).unwrap(), y);
        let y = ModelVector::from_vec((0..50).map(f64::from).collect());
        let a = rand_k(&y, 7, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = rand_k(&y, 7, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(rand_k(&y, 51, &mut rng).is_err());
    }

    #[test]
    fn rand_k_is_uniform() {
        let y = ModelVector::from_vec((0..10).map(f64::from).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = [0usize; 10];
        let trials = 100_000;
        for _ in 0..trials {
            hits[rand_k(&y, 1, &mut rng).unwrap().indices()[0] as usize] += 1;
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((0.095..=0.105).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn densify_construction() {
        let p = SparsePayload::new(vec![(2, -1.0), (0, 5.0)], 4).unwrap();
        assert_eq!(densify(&p).unwrap(), mv(&[5.0, 0.0, -1.0, 0.0]));
        assert!(SparsePayload::new(vec![(4, 1.0)], 4).is_err());
        assert!(SparsePayload::new(vec![(1, 1.0), (1, 2.0)], 4).is_err());
    }

    #[test]
    fn weights_count_coverage() {
        let a = SparsePayload::new(vec![(0, 1.0), (2, 1.0)], 3).unwrap();
        let b = SparsePayload::new(vec![(0, 1.0)], 3).unwrap();
        assert_eq!(aggregation_weights(&[a.clone(), b], 3).unwrap().0, vec![2.0, 1.0, 1.0]);
        assert_eq!(aggregation_weights(&[], 3).unwrap().0, vec![1.0; 3]);
        let full = top_k(&mv(&[1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(aggregation_weights(&vec![full; 5], 3).unwrap().0, vec![5.0; 3]);
        assert!(aggregation_weights(&[a], 4).is_err());
    }

    #[test]
    fn aggregate_divides_by_contributors() {
        let a = SparsePayload::new(vec![(0, 4.0)], 3).unwrap();
        let b = SparsePayload::new(vec![(0, 2.0), (2, 7.0)], 3).unwrap();
        assert_eq!(sparse_aggregate(&[a.clone(), b], 3).unwrap(), mv(&[3.0, 0.0, 7.0]));
        assert_eq!(sparse_aggregate(std::slice::from_ref(&a), 3).unwrap(), densify(&a).unwrap());
    }

    #[test]
    fn wire_layout() {
        let p = SparsePayload::new(vec![(3, 1.5), (1, -2.0)], 5).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[..8], &[5, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &(-2.0f32).to_le_bytes());
        assert_eq!(SparsePayload::decode(&bytes).unwrap(), p);
        assert!(SparsePayload::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[12] = 9; // second index past d
        assert!(SparsePayload::decode(&bad).is_err());
    }

    fn all_supports(d: usize, k: usize) -> Vec<Vec<usize>> {
        (0u32..(1 << d))
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..d).filter(|i| m & (1 << i) != 0).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn top_k_is_best_k_term_approximation(y in proptest::collection::vec(-10.0f64..10.0, 1..=8), kf in 0.0f64..1.0) {
            let d = y.len();
            let k = 1 + ((d - 1) as f64 * kf) as usize;
            let y = ModelVector::from_vec(y);
            let kept = densify(&top_k(&y, k).unwrap()).unwrap();
            let err = y.dist_sq(&kept);
            for support in all_supports(d, k) {
                let other = gather(&y, support);
                prop_assert!(err <= y.dist_sq(&densify(&other).unwrap()) + 1e-12);
            }
        }

        #[test]
        fn codec_round_trip_is_exact(values in proptest::collection::vec(-1e6f32..1e6, 1..40), seed in any::<u64>()) {
            let y = ModelVector::from_vec(values.iter().map(|v| f64::from(*v)).collect());
            let k = 1 + (seed as usize % y.len());
            let p = rand_k(&y, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let back = SparsePayload::decode(&p.encode()).unwrap();
            prop_assert_eq!(&back, &p);
            let dense = densify(&back).unwrap();
            for (&i, &v) in p.indices().iter().zip(p.values()) {
                prop_assert_eq!(dense[i as usize].to_bits(), v.to_bits());
            }
        }

        #[test]
        fn weights_bounded_by_payload_count(seed in any::<u64>(), n in 0usize..6, d in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = ModelVector::from_vec((0..d).map(|i| i as f64).collect());
            let payloads: Vec<_> = (0..n).map(|i| rand_k(&y, 1 + (i % d), &mut rng).unwrap()).collect();
            let w = aggregation_weights(&payloads, d).unwrap();
            for &wj in &w.0 {
                prop_assert!(wj >= 1.0 && wj <= n.max(1) as f64);
            }
        }
    }
}
