//! Score/performance features of one piece: chords, the alignment matrix,
//! normalized attributes, excerpt windows and the exact inverse.

use pianoplan::dataset::piece_features;
use pianoplan::notedata::{
    build_alignment_matrix, extract_performance_features, group_chords, invert_features, AlignedPiece,
};
use pianoplan::synthworld::{generate_world, WorldSpec};

fn main() -> anyhow::Result<()> {
    let world = generate_world(&WorldSpec { pieces: 1, seed: 3, ..WorldSpec::default() })?;
    let piece = &world.pieces[0];

    let chords = group_chords(&piece.score)?;
    println!("{} notes in {} chords; first chords {:?}", piece.len(), chords.num_chords(), &chords.groups()[..4]);
    let m = build_alignment_matrix(&chords);
    println!("alignment matrix {:?}, chord sizes {:?}", m.0.shape(), &m.row_sums()[..8]);

    let feats = extract_performance_features(piece, &chords)?;
    println!("first notes (vel, ioi ratio, articulation), normalized:");
    for n in 0..4 {
        println!("  {:+.3?}   raw {:+.3?}", feats.x.row(n), feats.raw_x.row(n));
    }

    // features -> performance -> features is the identity
    let perf = invert_features(&feats.x, &piece.score, &chords)?;
    let again = AlignedPiece::new(piece.id.clone(), piece.score.iter().cloned().zip(perf).collect())?;
    let x2 = extract_performance_features(&again, &chords)?.x;
    println!("round-trip max deviation {:.1e}", x2.max_abs_diff(&feats.x));

    let excerpts = piece_features(piece)?.excerpts();
    for e in &excerpts {
        println!("excerpt at chord {:>3}: {:>3} chords, {:>3} notes", e.start_chord, e.num_chords(), e.num_notes());
    }
    Ok(())
}
