use super::Descriptor;

/// Mutual-best Hamming matching with a Lowe ratio test.
///
/// For every descriptor in `a` the nearest neighbor in `b` is kept when its
/// distance is at most `max_hamming` and strictly beats `ratio` times the
/// second-best distance; a pair survives only when it is also the best match
/// seen from `b`'s side, which makes the result injective on both sides.
pub fn match_descriptors(
    a: &[Descriptor],
    b: &[Descriptor],
    max_hamming: u32,
    ratio: f64,
) -> Vec<(usize, usize)> {
    assert!(ratio > 0.0 && ratio <= 1.0);
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }

    let best_of = |query: &Descriptor, pool: &[Descriptor]| -> (usize, u32, u32) {
        let mut best_idx = 0;
        let mut best = u32::MAX;
        let mut second = u32::MAX;
        for (j, cand) in pool.iter().enumerate() {
            let d = query.hamming(cand);
            if d < best {
                second = best;
                best = d;
                best_idx = j;
            } else if d < second {
                second = d;
            }
        }
        (best_idx, best, second)
    };

    // Nearest a-index for every b descriptor, for the mutual check.
    let best_for_b: Vec<usize> = b.iter().map(|d| best_of(d, a).0).collect();

    let mut matches = Vec::new();
    for (i, d) in a.iter().enumerate() {
        let (j, best, second) = best_of(d, b);
        if best > max_hamming {
            continue;
        }
        if second != u32::MAX && (best as f64) >= ratio * (second as f64) {
            continue;
        }
        if best_for_b[j] == i {
            matches.push((i, j));
        }
    }
    matches
}
