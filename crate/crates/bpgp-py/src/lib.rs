use pyo3::prelude::*;
#[pymodule]
fn bpgp_py(_m: &Bound<PyModule>) -> PyResult<()> { Ok(()) }
