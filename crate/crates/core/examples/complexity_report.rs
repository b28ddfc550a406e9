//! Prints the complexity report of a variant.
//!
//! `cargo run --example complexity_report -- small 224 table`

use lemevit::complexity::{count_model, emit_report, Convention};
use lemevit::VariantSpec;

fn main() -> lemevit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec = VariantSpec::by_name(args.first().map_or("tiny", String::as_str))?;
    let side: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(224);
    let format = args.get(2).map_or("table", String::as_str);
    let report = count_model(&spec, (side, side), Convention::Table)?;
    print!("{}", emit_report(&report, format)?);
    Ok(())
}
