fn main() {
    // Dense Hermitian diagonalization and linear solves go through the system
    // LAPACK/BLAS (OpenBLAS ships both symbol sets in one library).
    println!("cargo:rustc-link-lib=dylib=openblas");
}
