"""Built-in anomaly detector plugins for tensortrack"""
