"""Dynamic-risk actor-critic on tabular MDPs."""
