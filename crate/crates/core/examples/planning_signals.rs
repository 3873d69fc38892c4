//! The two training signals of a piece: a low-degree polynomial contour
//! (planning) and the sign pattern of what the contour leaves out
//! (structure), compared with the world's ground truth.

use pianoplan::dataset::piece_features;
use pianoplan::hier::n2c;
use pianoplan::metrics::pearson;
use pianoplan::regularizers::{fit_planning_signal, structure_signal};
use pianoplan::synthworld::{generate_world, WorldSpec};

fn main() -> anyhow::Result<()> {
    let world = generate_world(&WorldSpec { pieces: 5, seed: 11, noise: 0.02, ..WorldSpec::default() })?;
    for (piece, truth) in world.pieces.iter().zip(&world.truth) {
        let f = piece_features(piece)?;
        let k = n2c(&f.x, &f.partition)?;
        println!("{} ({} chords)", piece.id, k.rows());
        for degree in [1, 4, 8] {
            let fit = fit_planning_signal(&k, degree);
            let r: Vec<String> = (0..3)
                .map(|a| format!("{:+.3}", pearson(&fit.i_pln.col(a), &truth.planning.col(a)).unwrap_or(f64::NAN)))
                .collect();
            println!("  degree {degree}: corr with true planning (vel, tempo, art) = {}", r.join(", "));
        }
        let fit = fit_planning_signal(&k, 4);
        let s = structure_signal(&k, &fit.i_pln);
        let agree = (0..k.rows() * 3)
            .filter(|&i| s.data()[i] == truth.residual.data()[i].signum())
            .count() as f64
            / (k.rows() * 3) as f64;
        println!("  structure signs agree with the true residual on {:.0}% of entries", 100.0 * agree);
    }
    Ok(())
}
