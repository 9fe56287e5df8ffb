// temporary probe
use karma_dpg::game::GameConfig;
use karma_dpg::sne::*;
use std::time::Instant;

fn main() {
    let cfg = GameConfig::from_json(include_str!("../instances/instance-2u.json")).unwrap();
    let scfg = SneSolverConfig::default();
    let t0 = Instant::now();
    let sne = solve_sne(&cfg, &scfg, 0).unwrap();
    println!("2u: converged={} iters={} resid={:.3e} expl={:.3e} gap={:.4e}  [{:?}]",
        sne.converged, sne.iterations, sne.residual_sne1, sne.exploitability, sne.action_gap, t0.elapsed());
    // expected-bid curve sanity: monotone-ish in karma per urgency
    for u in 0..2 {
        let row: Vec<f64> = (0..=40).map(|k| {
            (0..=k).map(|a| a as f64 * sne.mean_field.pi[[u, k, a]]).sum::<f64>()
        }).collect();
        println!("E[bid|u={u}]: {:?}", row.iter().map(|x| (x*100.0).round()/100.0).collect::<Vec<_>>());
    }
    let mk: f64 = (0..2).map(|u| (0..=40).map(|k| sne.mean_field.mu[[u,k]] * k as f64).sum::<f64>()).sum();
    println!("mean karma at SNE: {mk:.4}");

    let cfg3 = GameConfig::from_json(include_str!("../instances/instance-3u.json")).unwrap();
    let t0 = Instant::now();
    let sne3 = solve_sne(&cfg3, &scfg, 0).unwrap();
    println!("3u: converged={} iters={} resid={:.3e} expl={:.3e} gap={:.4e}  [{:?}]",
        sne3.converged, sne3.iterations, sne3.residual_sne1, sne3.exploitability, sne3.action_gap, t0.elapsed());
}
