//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Foo<Tensor>` holds
//! weights, `Foo<Var>` the same weights bound into a [`crate::Graph`], and a
//! second `Foo<Tensor>` can carry gradients or optimizer moments. `map`
//! converts between them while walking leaves in a fixed order with dotted
//! names such as `local.w_q`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Generates a parameter struct whose fields are all leaves.
macro_rules! leaf_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::Tensor> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use leaf_group;

/// Uniform access to the tensors of a parameter tree.
pub trait ParamTree: Clone {
    fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |n, t| out.push((String::from(n), t.clone())));
        out
    }

    /// Total scalar count.
    fn count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, t| n += t.len());
        n
    }

    /// Replaces tensors in visit order. Fails if names or shapes differ.
    fn load_named(&mut self, tensors: &[(String, Tensor)]) -> crate::Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_tensors_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(i) {
                Some((n, src)) if n == name && src.shape() == t.shape() => *t = src.clone(),
                Some((n, src)) => {
                    err = Some(format!(
                        "expected {name} {:?}, found {n} {:?}",
                        t.shape(),
                        src.shape()
                    ))
                }
                None => err = Some(format!("missing tensor {name}")),
            }
            i += 1;
        });
        match err {
            Some(e) => Err(crate::Error::Layout(e)),
            None if i != tensors.len() => Err(crate::Error::Layout(format!(
                "{} tensors supplied, {i} expected",
                tensors.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Binds every leaf as a trainable graph parameter.
pub fn bind_param(g: &mut Graph) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| g.param(t)
}

/// Binds every leaf as a constant.
pub fn bind_const(g: &mut Graph) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| g.constant(t.clone())
}
