//! Deterministic 3D backbone surrogate built from a dot-bracket string.
//!
//! Stems become idealised double helices. Loops closed by a pair are laid on
//! a circle through the closing pair, with child stems growing radially out of
//! it. The exterior loop runs along the x axis with stems rising along +y.

use std::f64::consts::PI;

use crate::fold::DotBracket;
use crate::metrics::{BackboneCoords, Point3};

pub const HELIX_RISE: f64 = 2.8;
pub const HELIX_TWIST_DEG: f64 = 32.7;
pub const HELIX_RADIUS: f64 = 9.0;
/// Distance between consecutive unpaired residues.
pub const LINK: f64 = 5.9;

pub fn helix_layout(db: &DotBracket) -> BackboneCoords {
    let partners = db.partners();
    let n = partners.len();
    let mut pos = vec![Point3::zeros(); n];
    let mut x = 0.0;
    let mut i = 0;
    while i < n {
        match partners[i] {
            Some(j) if j > i => {
                let a = Point3::new(x, 0.0, 0.0);
                let b = Point3::new(x + 2.0 * HELIX_RADIUS, 0.0, 0.0);
                place_stem(i, j, a, b, Point3::y(), &partners, &mut pos);
                x += 2.0 * HELIX_RADIUS + LINK;
                i = j + 1;
            }
            _ => {
                pos[i] = Point3::new(x, 0.0, 0.0);
                x += LINK;
                i += 1;
            }
        }
    }
    BackboneCoords(pos)
}

/// Places the stem opened by `(i, j)` with `i` at `a`, `j` at `b`, growing
/// along the unit vector `axis`.
fn place_stem(
    i: usize,
    j: usize,
    a: Point3,
    b: Point3,
    axis: Point3,
    partners: &[Option<usize>],
    pos: &mut [Point3],
) {
    let base = (a + b) / 2.0;
    let e1 = (a - base).normalize();
    let e2 = axis.cross(&e1);
    let twist = HELIX_TWIST_DEG.to_radians();
    let (mut p, mut q) = (i, j);
    let mut k = 0usize;
    loop {
        let theta = k as f64 * twist;
        let centre = base + axis * (k as f64 * HELIX_RISE);
        let radial = (e1 * theta.cos() + e2 * theta.sin()) * HELIX_RADIUS;
        pos[p] = centre + radial;
        pos[q] = centre - radial;
        if p + 1 < q - 1 && partners[p + 1] == Some(q - 1) {
            p += 1;
            q -= 1;
            k += 1;
        } else {
            let ex = radial / HELIX_RADIUS;
            place_loop(p, q, centre, ex, axis, partners, pos);
            return;
        }
    }
}

enum Item {
    Unpaired(usize),
    Stem(usize, usize),
}

/// Lays out the loop closed by `(p, q)`; `p` sits at `mid + R·ex`, `q` at
/// `mid − R·ex`, and the loop opens towards `ey`.
fn place_loop(
    p: usize,
    q: usize,
    mid: Point3,
    ex: Point3,
    ey: Point3,
    partners: &[Option<usize>],
    pos: &mut [Point3],
) {
    let mut items = Vec::new();
    let mut r = p + 1;
    while r < q {
        match partners[r] {
            Some(s) if s > r => {
                items.push(Item::Stem(r, s));
                r = s + 1;
            }
            _ => {
                items.push(Item::Unpaired(r));
                r += 1;
            }
        }
    }
    // Vertices in order p, ..., q, each edge with its chord length.
    let mut vertices = vec![p];
    let mut chords = Vec::new();
    for item in &items {
        match *item {
            Item::Unpaired(u) => {
                chords.push(LINK);
                vertices.push(u);
            }
            Item::Stem(a, b) => {
                chords.push(LINK);
                vertices.push(a);
                chords.push(2.0 * HELIX_RADIUS);
                vertices.push(b);
            }
        }
    }
    chords.push(LINK);
    vertices.push(q);

    let closing = 2.0 * HELIX_RADIUS;
    let (rho, major) = solve_loop_radius(&chords, closing);
    let half = closing / 2.0;
    let h = (rho * rho - half * half).max(0.0).sqrt();
    let yc = if major { -h } else { h };
    let centre = mid + ey * yc;

    let mut phi = (-yc).atan2(half);
    for (k, &v) in vertices.iter().enumerate().skip(1) {
        phi += chord_angle(chords[k - 1], rho);
        let (x2, y2) = (rho * phi.cos(), yc + rho * phi.sin());
        if v != q {
            pos[v] = mid + ex * x2 + ey * y2;
        }
    }

    for item in &items {
        if let Item::Stem(a, b) = *item {
            let (pa, pb) = (pos[a], pos[b]);
            let chord_mid = (pa + pb) / 2.0;
            let outward = (chord_mid - centre).normalize();
            place_stem(a, b, pa, pb, outward, partners, pos);
        }
    }
}

fn chord_angle(c: f64, rho: f64) -> f64 {
    2.0 * (c / (2.0 * rho)).min(1.0).asin()
}

/// Circle radius through a polygon with the given edge chords plus a closing
/// chord. The flag reports whether the closing chord subtends the major arc.
fn solve_loop_radius(chords: &[f64], closing: f64) -> (f64, bool) {
    let lo = chords.iter().cloned().fold(closing, f64::max) / 2.0;
    let sum_at = |rho: f64| chords.iter().map(|&c| chord_angle(c, rho)).sum::<f64>();
    if sum_at(lo) + chord_angle(closing, lo) >= 2.0 * PI {
        let f = |rho: f64| sum_at(rho) + chord_angle(closing, rho) - 2.0 * PI;
        return (bisect(f, lo), false);
    }
    let g = |rho: f64| sum_at(rho) - chord_angle(closing, rho);
    if chords.iter().sum::<f64>() <= closing {
        // Too few loop residues to close a circle; fall back to the smallest one.
        return (lo, true);
    }
    (bisect(g, lo), true)
}

/// Root of a function that is negative-or-zero at `lo` and changes sign on
/// `[lo, ∞)`.
fn bisect(f: impl Fn(f64) -> f64, lo: f64) -> f64 {
    let sign_lo = f(lo).signum();
    let mut hi = lo * 2.0;
    while f(hi).signum() == sign_lo && hi < 1e9 {
        hi *= 2.0;
    }
    let mut a = lo;
    let mut b = hi;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m).signum() == sign_lo {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(s: &str) -> BackboneCoords {
        helix_layout(&DotBracket::parse(s).unwrap())
    }

    fn dist(c: &BackboneCoords, i: usize, j: usize) -> f64 {
        (c.points()[i] - c.points()[j]).norm()
    }

    #[test]
    fn deterministic() {
        let a = layout("((((....))))..((...))");
        let b = layout("((((....))))..((...))");
        assert_eq!(a, b);
    }

    #[test]
    fn unpaired_chain_has_constant_spacing() {
        let c = layout("......");
        for i in 0..5 {
            assert!((dist(&c, i, i + 1) - LINK).abs() < 1e-12);
        }
    }

    #[test]
    fn one_pair_changes_coordinates() {
        let a = layout("(((....)))");
        let b = layout("((......))");
        assert_ne!(a, b);
    }

    #[test]
    fn paired_residues_sit_across_the_helix() {
        let c = layout("((((....))))");
        for k in 0..4 {
            assert!((dist(&c, k, 11 - k) - 2.0 * HELIX_RADIUS).abs() < 1e-9);
        }
        // Consecutive stem residues follow rise and twist.
        let twist = HELIX_TWIST_DEG.to_radians();
        let expect = (HELIX_RISE.powi(2) + (2.0 * HELIX_RADIUS * (twist / 2.0).sin()).powi(2)).sqrt();
        assert!((dist(&c, 0, 1) - expect).abs() < 1e-9);
    }

    #[test]
    fn hairpin_loop_links_are_uniform() {
        let c = layout("((((.....))))");
        // Loop residues 4..=8 sit between pair (3, 9) on one circle.
        for i in 3..9 {
            assert!((dist(&c, i, i + 1) - LINK).abs() < 1e-6, "link {i}");
        }
    }

    #[test]
    fn multiloop_is_finite_and_spaced() {
        let c = layout("((..((...))..((...))..))");
        assert!(c.points().iter().all(|p| p.iter().all(|v| v.is_finite())));
        for (a, b) in [(1, 2), (2, 3), (3, 4), (10, 11), (11, 12), (12, 13)] {
            assert!((dist(&c, a, b) - LINK).abs() < 1e-6, "link {a}-{b}");
        }
        assert!((dist(&c, 4, 10) - 2.0 * HELIX_RADIUS).abs() < 1e-6);
    }
}
