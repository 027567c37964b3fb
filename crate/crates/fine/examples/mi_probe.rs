// quick calibration probe for the MI acceptance cells
use fine::harness::mi_bench::run_cell;
fn main() {
    for (rho, dim) in [(0.5f64, 1usize), (0.9, 1), (0.5, 2), (0.0, 1)] {
        let t = std::time::Instant::now();
        let cell = run_cell::<f64>(rho, dim, 2000, 256, 50, 7).unwrap();
        println!(
            "rho={rho} dim={dim} true={:.4} infonce={:.4} club={:.4}  ({:.1}s)  bounds: nce in [{:.4},{:.4}] club >= {:.4}",
            cell.true_mi, cell.infonce, cell.club, t.elapsed().as_secs_f64(),
            0.4 * cell.true_mi, cell.true_mi + 0.05, cell.true_mi - 0.1
        );
    }
}
