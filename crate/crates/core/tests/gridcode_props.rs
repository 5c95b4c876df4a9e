use std::f64::consts::PI;

use griddpp::gridcode::{build_codebook, GridCodeConfig, GridCodebook};
use proptest::prelude::*;

fn default_book() -> GridCodebook {
    build_codebook(&GridCodeConfig::default()).unwrap()
}

/// Direct evaluation of the three-cosine formula with independently derived
/// basis vectors and offsets.
fn oracle_response(config: &GridCodeConfig, f: usize, p: usize, point: [f64; 2]) -> f64 {
    let freq = config.base_frequency * config.frequency_scaling.powi(f as i32);
    let side = (config.num_phases as f64).sqrt() as usize;
    let (i, j) = ((p / side) as f64 / side as f64, (p % side) as f64 / side as f64);
    // Period lattice of cos(b_k·φ) for b at 0°, 60°, 120°.
    let a1 = [2.0 * PI, -2.0 * PI / 3f64.sqrt()];
    let a2 = [0.0, 4.0 * PI / 3f64.sqrt()];
    let off = [i * a1[0] + j * a2[0], i * a1[1] + j * a2[1]];
    let phi = [freq * point[0] + off[0], freq * point[1] + off[1]];
    let s: f64 = (0..3)
        .map(|k| {
            let t = k as f64 * PI / 3.0;
            (t.cos() * phi[0] + t.sin() * phi[1]).cos()
        })
        .sum();
    s.max(0.0)
}

#[test]
fn encode_matches_direct_formula() {
    let config = GridCodeConfig { num_frequencies: 3, num_phases: 9, ..Default::default() };
    let book = build_codebook(&config).unwrap();
    for point in [[0, 0], [3, 17], [999, 1], [512, 640]] {
        let e = book.encode(point).unwrap();
        for f in 0..3 {
            for p in 0..9 {
                let want = oracle_response(&config, f, p, [point[0] as f64, point[1] as f64]);
                assert!((e.values[f * 9 + p] - want).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activations_bounded_and_deterministic(x in 0i64..1000, y in 0i64..1000) {
        let book = default_book();
        let a = book.encode([x, y]).unwrap();
        let b = book.encode([x, y]).unwrap();
        prop_assert!(a.values.iter().all(|&v| (0.0..=3.0).contains(&v)));
        prop_assert!(a.values.iter().zip(&b.values).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert_eq!(a.source_point, [x, y]);
    }

    #[test]
    fn band_is_periodic_under_its_lattice(x in 0i64..1000, y in 0i64..1000, f in 0usize..9, m in -2i32..=2, n in -2i32..=2) {
        let book = default_book();
        let [p1, p2] = book.period_vectors(f);
        let shift = [m as f64 * p1[0] + n as f64 * p2[0], m as f64 * p1[1] + n as f64 * p2[1]];
        let mut a = vec![0.0; book.num_cells()];
        let mut b = vec![0.0; book.num_cells()];
        book.response_at([x as f64, y as f64], &mut a);
        book.response_at([x as f64 + shift[0], y as f64 + shift[1]], &mut b);
        for i in book.band(f) {
            prop_assert!((a[i] - b[i]).abs() <= 1e-9, "cell {} deviates by {}", i, (a[i] - b[i]).abs());
        }
    }

    #[test]
    fn commensurate_bank_has_integer_periods(x in 0i64..800, y in 0i64..1000) {
        // F_0 = 2π/50 and doubling per band: P_f = (100 / 2^f, 0) solves b_k·F_f·P_f ∈ 2πZ.
        let config = GridCodeConfig { num_frequencies: 2, num_phases: 4, base_frequency: 2.0 * PI / 50.0, frequency_scaling: 2.0, coverage_extent: 1000 };
        let book = build_codebook(&config).unwrap();
        for f in 0..2 {
            let p = 100 >> f;
            let a = book.encode([x, y]).unwrap();
            let b = book.encode([x + p, y]).unwrap();
            for i in book.band(f) {
                prop_assert!((a.values[i] - b.values[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn out_of_coverage_is_an_error(x in -50i64..1050, y in -50i64..1050) {
        let book = default_book();
        let inside = (0..1000).contains(&x) && (0..1000).contains(&y);
        prop_assert_eq!(book.encode([x, y]).is_ok(), inside);
    }
}

#[test]
fn highest_band_varies_more_than_lowest_over_training_region() {
    let book = default_book();
    let points: Vec<[i64; 2]> = (0..100).flat_map(|x| (0..100).map(move |y| [x, y])).collect();
    let r = book.encode_batch(&points).unwrap();
    assert_eq!(r.shape(), (10_000, 900));
    let band_mean = |f: usize| {
        book.band(f)
            .map(|c| {
                let col = r.column(c);
                let m = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64
            })
            .sum::<f64>()
            / 100.0
    };
    assert!(band_mean(8) > band_mean(0));
}

#[test]
fn empty_batch_has_full_width() {
    assert_eq!(default_book().encode_batch(&[]).unwrap().shape(), (0, 900));
}
