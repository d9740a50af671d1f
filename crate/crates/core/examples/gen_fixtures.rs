//! Regenerates the synthetic fixtures.
//!
//! ```text
//! cargo run -p qkdlink --example gen_fixtures -- fixtures
//! ```

fn main() {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures".to_string());
    if let Err(e) = qkdlink::fixtures::write_all(std::path::Path::new(&dir)) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    println!("fixtures written to {dir}");
}
