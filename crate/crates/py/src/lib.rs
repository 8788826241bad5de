use pyo3::prelude::*;

#[pymodule]
fn veil_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
