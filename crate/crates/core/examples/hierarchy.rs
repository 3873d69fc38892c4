//! Note-to-chord pooling and chord-to-note broadcasting.

use pianoplan::hier::{c2n, n2c};
use pianoplan::notedata::{build_alignment_matrix, ChordPartition};
use pianoplan::Matrix;

fn main() -> anyhow::Result<()> {
    // five notes in three chords: {0, 1}, {2}, {3, 4}
    let p = ChordPartition::from_groups(vec![vec![0, 1], vec![2], vec![3, 4]])?;
    let notes = Matrix::from_rows(&[[1.0, 10.0], [3.0, 20.0], [5.0, 30.0], [0.0, 0.0], [2.0, -4.0]]);

    let chords = n2c(&notes, &p)?;
    println!("chord means:\n{:?}", (0..3).map(|c| chords.row(c).to_vec()).collect::<Vec<_>>());
    let back = c2n(&chords, &p)?;
    println!("broadcast back:\n{:?}", (0..5).map(|n| back.row(n).to_vec()).collect::<Vec<_>>());

    // pooling a broadcast is the identity on chords
    println!("n2c(c2n(e)) = e: {}", n2c(&back, &p)? == chords);

    // both are products with the binary alignment matrix
    let m = build_alignment_matrix(&p).0;
    println!("M =");
    for c in 0..m.rows() {
        println!("  {:?}", m.row(c));
    }
    println!("c2n(e) = M^T e: {}", m.t_matmul(&chords).max_abs_diff(&back) == 0.0);
    Ok(())
}
