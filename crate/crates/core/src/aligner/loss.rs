//! Guidance objectives over binder embeddings.

use crate::autodiff::{Graph, Var};
use crate::binder::{distance_graph, embedding_distance};
use crate::error::Result;
use crate::tensor::Tensor;

/// `F(gen, cond) + F(gen, prompt)`, or just `F(gen, cond)` without a prompt.
pub fn cross_guidance_loss(
    e_gen: &Tensor,
    e_cond: &Tensor,
    e_prompt: Option<&Tensor>,
) -> Result<f64> {
    let mut l = embedding_distance(e_gen, e_cond)?;
    if let Some(p) = e_prompt {
        l += embedding_distance(e_gen, p)?;
    }
    Ok(l)
}

/// Triangle loss `F(v, p) + F(v, a) + F(a, p)`.
pub fn joint_guidance_loss(e_v: &Tensor, e_a: &Tensor, e_p: &Tensor) -> Result<f64> {
    Ok(embedding_distance(e_v, e_p)?
        + embedding_distance(e_v, e_a)?
        + embedding_distance(e_a, e_p)?)
}

/// Taped cross-modal loss. Returns the scalar loss and its individual terms
/// (`[F(gen, cond)]` or `[F(gen, cond), F(gen, prompt)]`).
pub fn cross_guidance_loss_graph(
    g: &mut Graph,
    e_gen: Var,
    e_cond: Var,
    e_prompt: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let mut terms = vec![distance_graph(g, e_gen, e_cond)?];
    if let Some(p) = e_prompt {
        terms.push(distance_graph(g, e_gen, p)?);
    }
    Ok((sum_terms(g, &terms)?, terms))
}

/// Taped triangle loss; terms are `[F(v, p), F(v, a), F(a, p)]`.
pub fn joint_guidance_loss_graph(
    g: &mut Graph,
    e_v: Var,
    e_a: Var,
    e_p: Var,
) -> Result<(Var, Vec<Var>)> {
    let terms = vec![
        distance_graph(g, e_v, e_p)?,
        distance_graph(g, e_v, e_a)?,
        distance_graph(g, e_a, e_p)?,
    ];
    Ok((sum_terms(g, &terms)?, terms))
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.sum(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize) -> Tensor {
        let mut d = vec![0.0; 3];
        d[i] = 1.0;
        Tensor::vector(d)
    }

    #[test]
    fn cross_loss_examples() {
        assert_eq!(cross_guidance_loss(&e(0), &e(0), Some(&e(0))).unwrap(), 0.0);
        assert_eq!(cross_guidance_loss(&e(0), &e(1), Some(&e(2))).unwrap(), 2.0);
        assert_eq!(
            cross_guidance_loss(&e(0), &e(0).scale(-1.0), None).unwrap(),
            2.0
        );
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_guidance_loss(&e(1), &e(1), &e(1)).unwrap(), 0.0);
        assert_eq!(joint_guidance_loss(&e(0), &e(1), &e(2)).unwrap(), 3.0);
        assert_eq!(joint_guidance_loss(&e(0), &e(0), &e(2)).unwrap(), 2.0);
    }

    #[test]
    fn non_unit_embeddings_are_rejected() {
        assert!(cross_guidance_loss(&e(0).scale(2.0), &e(0), None).is_err());
        assert!(joint_guidance_loss(&e(0), &e(1), &e(2).scale(0.5)).is_err());
    }

    #[test]
    fn graph_and_plain_losses_agree() {
        let (v, a, p) = (
            Tensor::vector(vec![0.6, 0.8, 0.0]),
            Tensor::vector(vec![0.0, 0.6, 0.8]),
            Tensor::vector(vec![0.8, 0.0, 0.6]),
        );
        let mut g = Graph::new();
        let (vv, av, pv) = (
            g.constant(v.clone()),
            g.constant(a.clone()),
            g.constant(p.clone()),
        );
        let (l, terms) = joint_guidance_loss_graph(&mut g, vv, av, pv).unwrap();
        assert!((g.value(l).item() - joint_guidance_loss(&v, &a, &p).unwrap()).abs() < 1e-15);
        assert_eq!(terms.len(), 3);
        let (l, _) = cross_guidance_loss_graph(&mut g, vv, av, Some(pv)).unwrap();
        assert!((g.value(l).item() - cross_guidance_loss(&v, &a, Some(&p)).unwrap()).abs() < 1e-15);
    }
}
