//! Generate a synthetic world with known planning curves and look inside.
//!
//! `cargo run --example synthetic_world -- [out-dir]`

use pianoplan::synthworld::{generate_world, write_world, WorldSpec};

fn main() -> anyhow::Result<()> {
    let spec = WorldSpec::from_toml("seed = 7\npieces = 12\nnoise = 0.02\n")?;
    let world = generate_world(&spec)?;

    for (piece, truth) in world.pieces.iter().zip(&world.truth).take(4) {
        let chords = truth.planning.rows();
        println!("{}: {} notes, {} chords", piece.id, piece.len(), chords);
        for (a, name) in ["velocity", "tempo", "articulation"].iter().enumerate() {
            let curve = truth.planning.col(a);
            let (lo, hi) = curve.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            println!("  {name:<13} planning range [{lo:+.3}, {hi:+.3}], coeffs {:.3?}", truth.planning_coeffs[a]);
        }
    }
    // the same spec always yields the same world
    assert_eq!(generate_world(&spec)?.truth, world.truth);

    if let Some(dir) = std::env::args().nth(1) {
        write_world(&world, &dir)?;
        println!("wrote {dir}/notes.jsonl and {dir}/truth/");
    }
    Ok(())
}
