"""Norm-penalized mean-variance portfolios with differentiable QP layers."""
