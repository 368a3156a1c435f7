"""
kNN Quantile Forecaster Package

近傍に基づく目的変数変換と非交差の多項式分位点回帰による
太陽光発電量の確率的予測パッケージ
"""

__version__ = "1.0.0"
