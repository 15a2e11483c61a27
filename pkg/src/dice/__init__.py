"""Decentralized SGD simulator with counterfactual and first-order data influence."""
