//! Seeds the OpenML cache from a local gzipped CSV so the pipeline can run
//! without network access: `seed_cache <id> <name> <csv.gz> <cache-dir>`.

use std::io::Read;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 5 {
        eprintln!("usage: seed_cache <id> <name> <csv.gz> <cache-dir>");
        std::process::exit(2);
    }
    let id: u64 = args[1].parse().expect("numeric id");
    let file = std::fs::File::open(&args[3]).expect("open csv.gz");
    let mut bytes = Vec::new();
    flate2::read::GzDecoder::new(file)
        .read_to_end(&mut bytes)
        .expect("gunzip");
    let path = ignnet_core::openml::seed_cache(id, &args[2], &bytes, args[4].as_ref())
        .expect("seed cache");
    println!("{}", path.display());
}
