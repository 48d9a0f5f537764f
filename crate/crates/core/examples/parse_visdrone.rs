//! Parses VisDrone annotation lines and a domain metadata sidecar.
//!
//! cargo run --example parse_visdrone

use leapd::datasets::{format_annotations, parse_annotations, parse_metadata, parse_visdrone_line};

const ANNOTATION: &str = "\
684,8,273,116,0,0,0,0
10,10,5,5,1,4,0,0
120,64,30,18,1,6,1,0
40,40,12,9,0,11,0,0
";

const METADATA: &str = "\
# stem,altitude,view,weather
0000001_00000_d_0000001,low,front,day
0000002_00000_d_0000002,high,bird,foggy
";

fn main() -> leapd::Result<()> {
    let records = parse_annotations(ANNOTATION)?;
    for r in &records {
        let status = if r.is_ignored_region() {
            "ignored region"
        } else if r.is_excluded() {
            "others, excluded"
        } else {
            "kept"
        };
        println!("{r:<24} category {:2}  {status}", r.category);
    }
    assert_eq!(format_annotations(&records), ANNOTATION);
    println!("formatting reproduces the input exactly");

    for bad in ["1,2,3", "1,2,3,4,5,x,0,0", "1,2,3,4,5,12,0,0"] {
        println!("{bad:<20} -> {}", parse_visdrone_line(bad, 1).unwrap_err());
    }

    for (stem, domain) in parse_metadata(METADATA)? {
        println!("{stem}: {domain}");
    }
    match parse_metadata("x,low,front,sunny") {
        Err(e) => println!("unknown word -> {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
