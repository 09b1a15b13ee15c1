mod common;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srotlab::frames::{catalog, Point};
use srotlab::metric::{distance, DistanceOptions};

fn random_pairs(n: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, y)
        })
        .collect()
}

#[test]
fn heisenberg_matches_closed_form() {
    let h = catalog("heisenberg").unwrap();
    let opts = DistanceOptions::default();
    for (x, y) in random_pairs(3, 40, 11) {
        let got = distance(&h, &Point::new(&x), &Point::new(&y), &opts).unwrap().value;
        let want = common::heisenberg_distance(&x, &y);
        assert!((got - want).abs() < 1e-6, "{x:?} -> {y:?}: {got} vs {want}");
    }
}

#[test]
fn two_generating_matches_product_oracle() {
    let f = catalog("two_generating_r4").unwrap();
    let opts = DistanceOptions::default();
    for (x, y) in random_pairs(4, 15, 12) {
        let got = distance(&f, &Point::new(&x), &Point::new(&y), &opts).unwrap().value;
        let want = common::two_generating_distance(&x, &y);
        assert!((got - want).abs() < 1e-6, "{x:?} -> {y:?}: {got} vs {want}");
    }
}

// Short displacements, where the vertical endpoint barely responds to the
// bracket component of the covector.
#[test]
fn short_displacements_match_closed_form() {
    let opts = DistanceOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, n) in [("heisenberg", 3), ("two_generating_r4", 4)] {
        let f = catalog(name).unwrap();
        for _ in 0..15 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let scale = 10f64.powf(rng.random_range(-3.0..-1.0));
            let y: Vec<f64> = x.iter().map(|a| a + scale * rng.random_range(-1.0..1.0)).collect();
            let got = distance(&f, &Point::new(&x), &Point::new(&y), &opts).unwrap().value;
            let want = if n == 3 { common::heisenberg_distance(&x, &y) } else { common::two_generating_distance(&x, &y) };
            assert!((got - want).abs() < 1e-6, "{name} {x:?} -> {y:?}: {got} vs {want}");
        }
    }
}

// Nearly vertical displacements away from x1 = 0: the minimizer sits just
// short of the cut locus and a longer root lies past its conjugate point.
#[test]
fn near_cut_locus_pairs_find_the_minimizer() {
    let opts = DistanceOptions::default();
    let heis = catalog("heisenberg").unwrap();
    let cases = [
        ([0.899607654661750, 0.379307313956095, 0.476837181873874], [0.922188981149445, 0.338543494712317, 0.625818519790077]),
        ([0.541036154950844, 0.655451277857897, 0.579702463857869], [0.531712789061688, 0.877073888980814, 0.313979055729907]),
        ([0.314038072826083, 0.705207455048561, 0.879321801415413], [0.393146308448490, 0.769302287597269, 0.627393610966195]),
        ([0.356091675693184, 0.942807450464894, 0.576529527334212], [0.408666526357553, 0.923579007347274, 0.424834292154417]),
        ([0.997645093890208, 0.111089517740316, 0.644897541449825], [0.900316414479134, 0.191826946590590, 0.427003439635145]),
    ];
    for (x, y) in cases {
        let got = distance(&heis, &Point::new(&x), &Point::new(&y), &opts).unwrap().value;
        let want = common::heisenberg_distance(&x, &y);
        assert!((got - want).abs() < 1e-6, "{x:?} -> {y:?}: {got} vs {want}");
    }
    let f = catalog("two_generating_r4").unwrap();
    let x = [0.473319129393953, 0.679918213153184, 0.392782420560071, 0.210795571673379];
    let y = [0.524372803908110, 0.556492882112589, 0.450540229347037, 0.116187358391564];
    let got = distance(&f, &Point::new(&x), &Point::new(&y), &opts).unwrap().value;
    assert!((got - common::two_generating_distance(&x, &y)).abs() < 1e-6);
}

#[test]
fn oracle_reproduces_known_values() {
    assert!((common::heisenberg_distance(&[0.0; 3], &[1.0, 1.0, 0.5]) - 2f64.sqrt()).abs() < 1e-12);
    let v = common::heisenberg_distance(&[0.0; 3], &[0.0, 0.0, 0.25]);
    assert!((v - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    // dilations (x1, x2, x3) -> (s x1, s x2, s^2 x3) scale distances by s
    let y = [0.3, -0.7, 0.2];
    let s = 1.7;
    let ys = [s * y[0], s * y[1], s * s * y[2]];
    assert!((common::heisenberg_distance(&[0.0; 3], &ys) - s * common::heisenberg_distance(&[0.0; 3], &y)).abs() < 1e-10);
}

fn coords(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n)
}

fn fixed(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(7), failure_persistence: None, ..Config::default() }
}

proptest! {
    #![proptest_config(fixed(12))]

    #[test]
    fn symmetric_and_left_invariant(x in coords(3), y in coords(3), g in coords(3)) {
        let h = catalog("heisenberg").unwrap();
        let opts = DistanceOptions::default();
        let d = |a: &[f64], b: &[f64]| distance(&h, &Point::new(a), &Point::new(b), &opts).unwrap().value;
        let dxy = d(&x, &y);
        prop_assert!((dxy - d(&y, &x)).abs() < 1e-6);
        // left translation by g in the group law matching the frame
        let tr = |p: &[f64]| vec![g[0] + p[0], g[1] + p[1], g[2] + p[2] + g[0] * p[1]];
        prop_assert!((dxy - d(&tr(&x), &tr(&y))).abs() < 1e-6);
    }

    #[test]
    fn triangle_inequality(x in coords(3), y in coords(3), z in coords(3)) {
        let h = catalog("martinet").unwrap();
        let opts = DistanceOptions::default();
        let d = |a: &[f64], b: &[f64]| distance(&h, &Point::new(a), &Point::new(b), &opts).unwrap().value;
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-6);
    }

    #[test]
    fn distance_dominates_horizontal_projection(x in coords(4), y in coords(4)) {
        // the first two coordinates of rank2_dim4 move at unit speed at most
        let f = catalog("rank2_dim4").unwrap();
        let r = distance(&f, &Point::new(&x), &Point::new(&y), &DistanceOptions::default()).unwrap();
        prop_assert!(r.value + 1e-9 >= (y[0] - x[0]).hypot(y[1] - x[1]));
    }
}
