use nalgebra::DVector;
use panelec_core::panel::{assign_strata, build_incidence, build_panel_index, StrataRule};
use panelec_core::projections::WithinProjector;
use panelec_core::single_eq::within_fit;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_connected_panel(rng: &mut StdRng, max_ind: usize, max_per: usize) -> panelec_core::panel::PanelIndex {
    let n_ind = rng.gen_range(3..=max_ind.max(3));
    let t_len = rng.gen_range(2..=max_per.max(2));
    let mut obs = Vec::new();
    for t in 1..=t_len { obs.push((0u32, t as u32)); }
    for i in 1..n_ind {
        let mut any = false;
        for t in 1..=t_len {
            if rng.gen_bool(0.7) { obs.push((i as u32, t as u32)); any = true; }
        }
        if !any { let t = rng.gen_range(1..=t_len); obs.push((i as u32, t as u32)); }
    }
    build_panel_index(&obs).unwrap()
}

fn main() {
    let k = 2;
    for seed in 0u64..40 {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 3000 { println!("seed {seed}: STUCK after 3000 attempts"); break; }
            let ix = random_connected_panel(&mut rng, 7, 4);
            if ix.n_obs() < ix.n_individuals() + ix.n_periods() + k + 2 { continue; }
            let n_ind = ix.n_individuals();
            let a = 3.min(n_ind).max(1);
            let labels: Vec<String> = (0..n_ind).map(|i| format!("s{}", if i < a { i } else { rng.gen_range(0..a) })).collect();
            let strata = match assign_strata(&ix, &StrataRule::Explicit(labels)) { Ok(s) => s, Err(_) => continue };
            if strata.n_strata() != a { continue; }
            let _inc = build_incidence(&ix, &strata).unwrap();
            let proj = WithinProjector::new(&ix).unwrap();
            let x = nalgebra::DMatrix::from_fn(ix.n_obs(), k, |_, _| rng.gen_range(-1.0..1.0f64));
            let y = DVector::from_fn(ix.n_obs(), |r, _| x[(r,0)] + rng.gen_range(-0.5..0.5f64));
            match within_fit(&x, &y, &proj) {
                Ok(_) => { if attempts > 20 { println!("seed {seed}: ok after {attempts}"); } break; }
                Err(_) => continue,
            }
        }
    }
    println!("all seeds done");
}
