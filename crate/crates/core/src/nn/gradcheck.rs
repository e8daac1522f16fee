//! Central finite differences for checking hand-written gradients.

use crate::scalar::Scalar;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference<S, F>(mut f: F, x: &[S], h: S) -> Vec<S>
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.widen() - y.widen()));
    let scale = norm(&mut a.iter().map(|x| x.widen())).max(norm(&mut b.iter().map(|x| x.widen())));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
