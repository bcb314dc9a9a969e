//! Multi-scale correlation optical flow.
//!
//! A small reverse-mode tensor engine ([`tensor`]), the flow operators built on
//! it ([`flow_ops`]), the recurrent multi-scale network ([`model`]), synthetic
//! data and file formats ([`data`]), the training loop ([`trainer`]) and
//! endpoint-error evaluation ([`evaluator`]).

pub mod data;
pub mod evaluator;
pub mod flow_ops;
pub mod model;
pub mod trainer;
pub mod verify;
pub mod tensor;

#[cfg(test)]
mod properties;
