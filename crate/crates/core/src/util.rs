//! Small numeric helpers shared across modules.

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l)))
}

/// Apportions `total` integer units proportionally to `weights` with the
/// largest-remainder rule. Ties on the remainder go to the lowest index.
///
/// Non-finite or negative weights are treated as zero. If every weight is
/// zero the units are spread uniformly (again by largest remainder).
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let clean: Vec<f64> = weights
        .iter()
        .map(|&w| if w.is_finite() && w > 0.0 { w } else { 0.0 })
        .collect();
    let sum: f64 = clean.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        clean.iter().map(|w| w / sum).collect()
    } else {
        vec![1.0 / n as f64; n]
    };

    let mut out = Vec::with_capacity(n);
    let mut rems = Vec::with_capacity(n);
    let mut assigned: u64 = 0;
    for (idx, s) in shares.iter().enumerate() {
        let exact = s * total as f64;
        let base = (exact.floor() as u64).min(total - assigned);
        assigned += base;
        out.push(base);
        rems.push((exact - base as f64, idx));
    }
    let mut left = total - assigned;
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cursor = 0;
    while left > 0 {
        out[rems[cursor % n].1] += 1;
        left -= 1;
        cursor += 1;
    }
    out
}

/// Rounds to 9 significant decimal digits. The result prints (shortest
/// round-trip) with at most 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Converts `value` to JSON with every float rounded by [`round_sig9`], so
/// emitted documents are stable across runs and platforms.
pub fn to_json_sig9<T: serde::Serialize>(value: &T) -> serde_json::Result<serde_json::Value> {
    fn walk(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Number(n) if n.is_f64() => {
                if let Some(r) = n.as_f64().map(round_sig9).and_then(serde_json::Number::from_f64) {
                    *n = r;
                }
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(walk),
            serde_json::Value::Object(map) => map.values_mut().for_each(walk),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(value)?;
    walk(&mut v);
    Ok(v)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Nearest-rank percentile of an unsorted sample; `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 5), vec![3, 2]);
        assert_eq!(largest_remainder(&[3.0, 1.0], 0), vec![0, 0]);
        assert_eq!(largest_remainder(&[0.7, 0.2, 0.1], 10), vec![7, 2, 1]);
        let w = [1e-300, 0.5, f64::NAN, 2.0, 1.0 / 3.0];
        assert_eq!(largest_remainder(&w, 997).iter().sum::<u64>(), 997);
    }

    #[test]
    fn round_sig9_digits() {
        assert_eq!(round_sig9(1.0 / 3.0).to_string(), "0.333333333");
        assert_eq!(round_sig9(4.9), 4.9);
        assert_eq!(round_sig9(123456789012.0), 123456789000.0);
    }

    #[test]
    fn json_floats_are_rounded() {
        let v = to_json_sig9(&(1.0f64 / 3.0, 7u64, vec![2.0f64 / 3.0])).unwrap();
        assert_eq!(v.to_string(), "[0.333333333,7,[0.666666667]]");
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&[5.0], 0.5), 5.0);
    }
}
