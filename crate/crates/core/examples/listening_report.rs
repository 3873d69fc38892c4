//! Tabulate a listening test: how often each model's rendering beat the
//! plain one, per participant group.
//!
//! `cargo run --example listening_report -- [responses.csv]`

use pianoplan::metrics::{listening_report, listening_table, parse_listening_csv};

const DEMO: &str = "participant,group,trial,model,beat_plain
ana,T,1,hierarchical,1
ana,T,1,notewise,1
ana,T,2,hierarchical,1
ana,T,2,notewise,0
ben,T,1,hierarchical,0
ben,T,1,notewise,1
ben,T,2,hierarchical,1
ben,T,2,notewise,0
cy,UT,1,hierarchical,1
cy,UT,1,notewise,1
cy,UT,2,hierarchical,0
cy,UT,2,notewise,1
";

fn main() -> anyhow::Result<()> {
    let rows = match std::env::args().nth(1) {
        Some(p) => parse_listening_csv(std::fs::File::open(p)?)?,
        None => parse_listening_csv(DEMO.as_bytes())?,
    };
    let report = listening_report(&rows);
    print!("{}", listening_table(&report));
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
