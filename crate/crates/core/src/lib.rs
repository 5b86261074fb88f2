pub mod io;
pub mod nets;
pub mod prior;
pub mod quantizer;
pub mod tensor;
pub mod trainer;
