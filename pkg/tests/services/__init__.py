# Services tests package 