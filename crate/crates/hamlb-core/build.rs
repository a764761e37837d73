fn main() {
    // Link the system OpenBLAS, which provides BLAS, CBLAS and LAPACK in one
    // shared object. We deliberately avoid the source-build backends of
    // ndarray-linalg so the crate builds against whatever the distribution
    // ships (Debian/Ubuntu: `libopenblas-dev`).
    println!("cargo:rustc-link-lib=dylib=openblas");
}
