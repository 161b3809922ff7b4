use bfflow::analysis::{ensemble_study, AttractorReport};
use bfflow::cli::{build_system, full_solver, initial_state, parse_config};
use bfflow::rng::SeededRng;

fn ensemble(threads: usize) -> AttractorReport {
    let cfg = parse_config(
        "[grid]\nn = 8\n[medium]\ndiagonal = 1, 2\n[forcing]\nkind = fixed_random\namplitude = 2\n\
         [solver]\nscheme = semi_implicit\ndt = 0.01\n[run]\nt_max = 1\nsample_every = 0.1\n",
    )
    .unwrap();
    let grid = cfg.grid;
    let sys = build_system(&cfg, grid, false).unwrap();
    let scfg = full_solver(&cfg, &grid, 0.1);
    let mut rng = SeededRng::new(5);
    let states: Vec<_> = (0..6).map(|i| initial_state(&cfg, grid, &mut rng, 0.5 * (i + 1) as f64)).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| ensemble_study(&states, &scfg, &sys, 1.0, 0.1, 0).unwrap())
}

#[test]
fn ensemble_is_bit_identical_across_thread_counts() {
    let a = ensemble(1);
    let b = ensemble(3);
    let bits = |r: &AttractorReport| -> Vec<u64> {
        r.diam_series
            .iter()
            .chain(&r.dist_to_ball_series)
            .flat_map(|&(t, v)| [t.to_bits(), v.to_bits()])
            .chain([r.r_ball.to_bits()])
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.box_counts, b.box_counts);
}
