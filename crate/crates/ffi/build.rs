fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR is set");
    let out = std::path::Path::new(&crate_dir).join("include/sparsetok.h");
    std::fs::create_dir_all(out.parent().unwrap()).expect("include dir");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&out);
        }
        Err(err) => {
            // Header generation failing should not break library consumers
            // that only need the Rust artifacts.
            println!("cargo:warning=cbindgen failed: {err}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
