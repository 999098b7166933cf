//! Python bindings. Placeholder until the core API lands.

use pyo3::prelude::*;

#[pymodule]
fn handkit_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
