//! Matrix-multiply backend.
//!
//! All heavy math in this crate funnels through two strided GEMM entry
//! points. With the default `openblas` feature they dispatch to the system
//! OpenBLAS, loaded at runtime and pinned to one thread so rayon owns
//! parallelism and runs stay reproducible. If the library is missing (or the
//! feature is disabled) they fall back to the pure-Rust `matrixmultiply`
//! kernels, which are slower but always available.
//!
//! OpenBLAS is loaded with `dlopen` rather than linked, for two reasons: the
//! binary still runs on machines without it, and its CPU detection can be
//! steered first. OpenBLAS's `DYNAMIC_ARCH` cpuid probe falls back to generic
//! SSE kernels on VMs that mask the CPU model — a 4-5x throughput cliff — and
//! it reads `OPENBLAS_CORETYPE` in a load-time constructor, so the variable
//! must be in place before the library is mapped.
//!
//! Strides are in elements. The CBLAS path only accepts layouts where each
//! matrix is plain row-major (`cs == 1`) or a plain transpose (`rs == 1`);
//! that covers every call site in this crate.

#[cfg(feature = "openblas")]
mod blas {
    use std::ffi::c_void;
    use std::os::raw::{c_char, c_double, c_float, c_int};
    use std::sync::OnceLock;

    pub const ROW_MAJOR: c_int = 101;
    pub const NO_TRANS: c_int = 111;
    pub const TRANS: c_int = 112;

    // dlopen lives in libc itself on any glibc recent enough to matter.
    extern "C" {
        fn dlopen(filename: *const c_char, flag: c_int) -> *mut c_void;
        fn dlsym(handle: *mut c_void, symbol: *const c_char) -> *mut c_void;
    }
    const RTLD_NOW: c_int = 2;

    pub type SgemmFn = unsafe extern "C" fn(
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        c_float,
        *const c_float,
        c_int,
        *const c_float,
        c_int,
        c_float,
        *mut c_float,
        c_int,
    );
    pub type DgemmFn = unsafe extern "C" fn(
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        c_double,
        *const c_double,
        c_int,
        *const c_double,
        c_int,
        c_double,
        *mut c_double,
        c_int,
    );

    pub struct OpenBlas {
        pub sgemm: SgemmFn,
        pub dgemm: DgemmFn,
        pub get_config: unsafe extern "C" fn() -> *const c_char,
    }

    fn pick_core_type() -> Option<&'static str> {
        if std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512dq")
            && std::arch::is_x86_feature_detected!("avx512bw")
            && std::arch::is_x86_feature_detected!("avx512vl")
        {
            Some("SKYLAKEX")
        } else if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            Some("HASWELL")
        } else {
            None
        }
    }

    fn load() -> Option<OpenBlas> {
        // Steer kernel selection before the library's init constructor runs.
        // Respect an explicit user choice.
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            if let Some(core) = pick_core_type() {
                std::env::set_var("OPENBLAS_CORETYPE", core);
            }
        }
        unsafe {
            let mut handle = dlopen(c"libopenblas.so.0".as_ptr(), RTLD_NOW);
            if handle.is_null() {
                handle = dlopen(c"libopenblas.so".as_ptr(), RTLD_NOW);
            }
            if handle.is_null() {
                return None;
            }
            let sgemm = dlsym(handle, c"cblas_sgemm".as_ptr());
            let dgemm = dlsym(handle, c"cblas_dgemm".as_ptr());
            let get_config = dlsym(handle, c"openblas_get_config".as_ptr());
            let set_threads = dlsym(handle, c"openblas_set_num_threads".as_ptr());
            if sgemm.is_null() || dgemm.is_null() || get_config.is_null() {
                return None;
            }
            if !set_threads.is_null() {
                // One BLAS thread per call; outer loops are already parallel.
                let set: unsafe extern "C" fn(c_int) = std::mem::transmute(set_threads);
                set(1);
            }
            Some(OpenBlas {
                sgemm: std::mem::transmute::<*mut c_void, SgemmFn>(sgemm),
                dgemm: std::mem::transmute::<*mut c_void, DgemmFn>(dgemm),
                get_config: std::mem::transmute::<
                    *mut c_void,
                    unsafe extern "C" fn() -> *const c_char,
                >(get_config),
            })
        }
    }

    pub fn get() -> Option<&'static OpenBlas> {
        static LIB: OnceLock<Option<OpenBlas>> = OnceLock::new();
        LIB.get_or_init(load).as_ref()
    }
}

/// Human-readable description of the active GEMM backend.
pub fn backend_description() -> String {
    #[cfg(feature = "openblas")]
    if let Some(lib) = blas::get() {
        let cfg = unsafe { std::ffi::CStr::from_ptr((lib.get_config)()) };
        return format!("openblas ({})", cfg.to_string_lossy());
    }
    "matrixmultiply".to_string()
}

/// Maps the `(rs, cs)` element strides of a logically `rows x cols` operand
/// onto a row-major CBLAS transpose flag and leading dimension, or `None` if
/// the layout needs the fallback kernel.
#[cfg(feature = "openblas")]
fn cblas_operand(
    rs: isize,
    cs: isize,
    rows: usize,
    cols: usize,
) -> Option<(std::os::raw::c_int, i32)> {
    if cs == 1 && rs >= cols.max(1) as isize {
        // Plain row-major buffer.
        Some((blas::NO_TRANS, rs as i32))
    } else if rs == 1 && cs >= rows.max(1) as isize {
        // Buffer holds the transpose (cols x rows row-major).
        Some((blas::TRANS, cs as i32))
    } else {
        None
    }
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $field:ident, $mm:ident) => {
        /// Strided `C = alpha * A(m x k) * B(k x n) + beta * C(m x n)`.
        ///
        /// # Safety
        /// Pointers must be valid for the strided accesses implied by the
        /// shapes and strides, and `C` must not alias `A` or `B`.
        #[allow(clippy::too_many_arguments)]
        pub unsafe fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $ty,
            a: *const $ty,
            rsa: isize,
            csa: isize,
            b: *const $ty,
            rsb: isize,
            csb: isize,
            beta: $ty,
            c: *mut $ty,
            rsc: isize,
            csc: isize,
        ) {
            if m == 0 || n == 0 {
                return;
            }
            #[cfg(feature = "openblas")]
            if csc == 1 && rsc >= n as isize {
                if let (Some((ta, lda)), Some((tb, ldb))) =
                    (cblas_operand(rsa, csa, m, k), cblas_operand(rsb, csb, k, n))
                {
                    if let Some(lib) = blas::get() {
                        (lib.$field)(
                            blas::ROW_MAJOR,
                            ta,
                            tb,
                            m as i32,
                            n as i32,
                            k as i32,
                            alpha,
                            a,
                            lda,
                            b,
                            ldb,
                            beta,
                            c,
                            rsc as i32,
                        );
                        return;
                    }
                }
            }
            matrixmultiply::$mm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        }
    };
}

gemm_impl!(sgemm, f32, sgemm, sgemm);
gemm_impl!(dgemm, f64, dgemm, dgemm);
